"""Dual inverse propensity weighting for unbiased learning to rank.

Query sessions carry both a position bias (higher ranks get seen more)
and a query-level saturation bias (lists full of relevant results are
likelier to receive any click at all). This package trains a ranking
model that inversely weights clicks by both propensities, alongside
Naive / fixed-IPW / dual-learning baselines, a synthetic click simulator
for end-to-end verification, and evaluation tooling.
"""

from . import checks, config, dataset, evalkit, numkit, propensity, training
from .dataset import (
    AnnotatedQuery,
    BiasConfig,
    QuerySession,
    SessionSet,
    WorldConfig,
    filter_sessions,
    generate_synthetic_world,
    load_annotations,
    load_sessions,
    simulate_clicks,
)
from .evalkit import MetricReport, err_at_k, evaluate, ndcg_at_k, unbiasedness_mc_check
from .propensity import DmpTable, PositionPropModel, QueryPropModel, compute_dmp
from .training import CheckpointSet, ModelBundle, RankingModel, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "checks",
    "config",
    "dataset",
    "evalkit",
    "numkit",
    "propensity",
    "training",
    "AnnotatedQuery",
    "BiasConfig",
    "QuerySession",
    "SessionSet",
    "WorldConfig",
    "filter_sessions",
    "generate_synthetic_world",
    "load_annotations",
    "load_sessions",
    "simulate_clicks",
    "MetricReport",
    "err_at_k",
    "evaluate",
    "ndcg_at_k",
    "unbiasedness_mc_check",
    "DmpTable",
    "PositionPropModel",
    "QueryPropModel",
    "compute_dmp",
    "CheckpointSet",
    "ModelBundle",
    "RankingModel",
    "TrainConfig",
    "train",
    "__version__",
]
