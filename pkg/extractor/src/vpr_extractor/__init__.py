"""ViT feature export for the training-free place-recognition toolkit."""

from .errors import ConfigError, ExtractorError, WeightsError
from .extraction import (
    FACETS,
    ExtractConfig,
    ExtractReport,
    FacetCapture,
    extract,
    extract_cls,
    preprocess,
    tokens_to_grid,
)
from .formats import write_descriptor_set, write_feature_map, write_manifest_stub
from .models import MODEL_REGISTRY, WEIGHTS_ENV, ModelSpec, load_backbone

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExtractorError",
    "WeightsError",
    "FACETS",
    "ExtractConfig",
    "ExtractReport",
    "FacetCapture",
    "extract",
    "extract_cls",
    "preprocess",
    "tokens_to_grid",
    "write_descriptor_set",
    "write_feature_map",
    "write_manifest_stub",
    "MODEL_REGISTRY",
    "WEIGHTS_ENV",
    "ModelSpec",
    "load_backbone",
]
