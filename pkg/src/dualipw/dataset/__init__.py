"""Session data model, file formats, synthetic worlds, click simulation."""

from .sessions import (
    BUCKETS,
    FEATURE_DIM,
    LIST_SIZE,
    AnnotatedQuery,
    AnnotationParseError,
    DataFormatError,
    FilterStats,
    QuerySession,
    SessionParseError,
    SessionSet,
    batch_iter,
    filter_sessions,
    load_annotations,
    load_sessions,
    save_annotations,
    save_sessions,
)
from .synthetic import (
    BiasConfig,
    OracleRecord,
    SimulationResult,
    SimulationStats,
    SyntheticQuery,
    SyntheticWorld,
    WorldConfig,
    config_hash,
    generate_synthetic_world,
    load_sidecar,
    position_bias_vector,
    relevance_grades,
    saturation_propensity,
    save_sidecar,
    simulate_clicks,
)

__all__ = [
    "BUCKETS",
    "FEATURE_DIM",
    "LIST_SIZE",
    "AnnotatedQuery",
    "AnnotationParseError",
    "DataFormatError",
    "FilterStats",
    "QuerySession",
    "SessionParseError",
    "SessionSet",
    "batch_iter",
    "filter_sessions",
    "load_annotations",
    "load_sessions",
    "save_annotations",
    "save_sessions",
    "BiasConfig",
    "OracleRecord",
    "SimulationResult",
    "SimulationStats",
    "SyntheticQuery",
    "SyntheticWorld",
    "WorldConfig",
    "config_hash",
    "generate_synthetic_world",
    "load_sidecar",
    "position_bias_vector",
    "relevance_grades",
    "saturation_propensity",
    "save_sidecar",
    "simulate_clicks",
]
