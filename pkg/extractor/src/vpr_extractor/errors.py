class ExtractorError(Exception):
    """Base for everything this package raises on purpose."""


class ConfigError(ExtractorError):
    """Invalid model, layer, facet, or resize selection."""


class WeightsError(ExtractorError):
    """Pretrained weights could not be obtained; fatal."""
