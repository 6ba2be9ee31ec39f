"""Training-free visual place recognition toolkit.

Turns per-image dense feature maps (produced by any upstream extractor)
into global descriptors via pooling or VLAD over an unsupervised
vocabulary, optionally PCA-projects them, and scores retrieval with
Recall@K. All file formats are versioned and little-endian; every stage
is deterministic for fixed inputs and seeds.
"""

from .aggregation import (
    GlobalDescriptor,
    PoolingConfig,
    VladConfig,
    aggregate,
    aggregate_dataset,
    pool,
    vlad,
)
from .cluster_viz import (
    DEFAULT_PALETTE,
    AssignmentMap,
    assign_map,
    export_label_image,
    export_montage,
)
from .errors import (
    ConfigError,
    FormatError,
    InfeasibleError,
    ValidationError,
    VprError,
)
from .feature_store import (
    DatasetManifest,
    DescriptorSet,
    FeatureDirectory,
    FeatureMap,
    ManifestEntry,
    load_manifest,
    read_descriptor_set,
    read_feature_map,
    save_manifest,
    write_descriptor_set,
    write_feature_map,
)
from .projection import (
    PcaModel,
    export_domain_scatter,
    fit_pca,
    format_scatter_table,
    project,
    read_pca_model,
    write_pca_model,
)
from .retrieval import (
    QueryRanking,
    RetrievalReport,
    evaluate,
    evaluate_descriptors,
    format_report_text,
    rank,
    recall_at_k,
    report_to_dict,
    write_report_json,
)
from .vocabulary import (
    KMeansResult,
    VocabAssembly,
    VocabPart,
    Vocabulary,
    build_vocabulary,
    centers_fingerprint,
    collect_database_features,
    default_cluster_count,
    domain_vocab_presets,
    kmeans,
    read_vocabulary,
    write_vocabulary,
)

__version__ = "0.1.0"

__all__ = [
    "AssignmentMap",
    "ConfigError",
    "DEFAULT_PALETTE",
    "DatasetManifest",
    "DescriptorSet",
    "FeatureDirectory",
    "FeatureMap",
    "FormatError",
    "GlobalDescriptor",
    "InfeasibleError",
    "KMeansResult",
    "ManifestEntry",
    "PcaModel",
    "PoolingConfig",
    "QueryRanking",
    "RetrievalReport",
    "ValidationError",
    "VladConfig",
    "VocabAssembly",
    "VocabPart",
    "Vocabulary",
    "VprError",
    "aggregate",
    "aggregate_dataset",
    "assign_map",
    "build_vocabulary",
    "centers_fingerprint",
    "collect_database_features",
    "default_cluster_count",
    "domain_vocab_presets",
    "evaluate",
    "evaluate_descriptors",
    "export_domain_scatter",
    "export_label_image",
    "export_montage",
    "fit_pca",
    "format_report_text",
    "format_scatter_table",
    "kmeans",
    "load_manifest",
    "pool",
    "project",
    "rank",
    "read_descriptor_set",
    "read_feature_map",
    "read_pca_model",
    "read_vocabulary",
    "recall_at_k",
    "report_to_dict",
    "save_manifest",
    "vlad",
    "write_descriptor_set",
    "write_feature_map",
    "write_pca_model",
    "write_report_json",
    "write_vocabulary",
]
