"""Ranking metrics, the Monte Carlo unbiasedness checker, and analyses.

Graded metrics use gain 2**g - 1 with a log2 rank discount (nDCG) and the
cascading stop model with R = (2**g - 1) / 16 (ERR), the standard forms
for 0-4 graded judgments. Score ties break by stable original candidate
order and are counted.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset.sessions import LIST_SIZE, AnnotatedQuery, QuerySession, SessionSet, save_sessions
from .dataset.synthetic import SyntheticWorld
from .numkit.rng import stream_rng
from .propensity import (
    DmpTable,
    PositionPropModel,
    QueryPropModel,
    position_weight_ratio,
    qcp_forward,
    save_dmp,
)

__all__ = [
    "ndcg_at_k",
    "err_at_k",
    "mean_ndcg_at_k",
    "MetricReport",
    "evaluate",
    "save_metric_report",
    "save_per_query_metrics",
    "UnbiasednessResult",
    "unbiasedness_mc_check",
    "PilotPartition",
    "pilot_partition",
    "export_dmp_distributions",
    "export_click_weights",
]

logger = logging.getLogger("dualipw.evalkit")

DEFAULT_KS = (1, 3, 5, 10)
MAX_GRADE = 4


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def ndcg_at_k(ranked_labels: Sequence[int], k: int) -> float:
    """Normalized discounted cumulative gain at cutoff k.

    Normalization uses the ideal ordering over all candidates. Returns
    NaN for an all-zero grade list (no ideal ordering exists); callers
    exclude and count such queries.
    """
    if k < 1:
        raise ValueError(f"cutoff must be >= 1, got {k}")
    labels = np.asarray(ranked_labels, dtype=np.float64)
    gains = np.power(2.0, labels) - 1.0
    disc = _discounts(len(labels))
    dcg = float(np.sum(gains[:k] * disc[: min(k, len(labels))]))
    ideal = np.sort(gains)[::-1]
    idcg = float(np.sum(ideal[:k] * disc[: min(k, len(labels))]))
    if idcg == 0.0:
        return float("nan")
    return dcg / idcg


def err_at_k(ranked_labels: Sequence[int], k: int) -> float:
    """Expected reciprocal rank: a cascade user stops at rank r with
    probability R_r = (2**g - 1) / 2**MAX_GRADE."""
    if k < 1:
        raise ValueError(f"cutoff must be >= 1, got {k}")
    labels = np.asarray(ranked_labels, dtype=np.float64)
    stop = (np.power(2.0, labels) - 1.0) / (2.0**MAX_GRADE)
    err = 0.0
    not_stopped = 1.0
    for r in range(min(k, len(labels))):
        err += not_stopped * stop[r] / (r + 1)
        not_stopped *= 1.0 - stop[r]
    return err


def _ranked_labels(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, bool]:
    order = np.argsort(-scores, kind="stable")
    tied = len(np.unique(scores)) < len(scores)
    return labels[order], tied


def mean_ndcg_at_k(model, queries: Sequence[AnnotatedQuery], k: int = 10) -> float:
    """Mean nDCG@k over queries with at least one positive grade."""
    values = []
    for q in queries:
        ranked, _ = _ranked_labels(model.score(q.features), q.labels)
        v = ndcg_at_k(ranked, k)
        if not math.isnan(v):
            values.append(v)
    return float(np.mean(values)) if values else float("nan")


@dataclass
class MetricReport:
    """Per-cutoff means with per-query values and bucket breakdowns.

    nDCG means skip all-zero-grade queries (counted separately); ERR is
    defined for every query and averages over all of them.
    """

    ks: tuple[int, ...]
    ndcg: dict[int, float]
    err: dict[int, float]
    bucket_ndcg: dict[str, dict[int, float]]
    bucket_err: dict[str, dict[int, float]]
    per_query: list[dict]
    n_queries: int
    n_zero_label: int
    n_score_ties: int
    metadata: dict = field(default_factory=dict)


def evaluate(
    model,
    queries: Sequence[AnnotatedQuery],
    ks: Sequence[int] = DEFAULT_KS,
    metadata: Mapping | None = None,
) -> MetricReport:
    """Score, rank, and compute nDCG/ERR overall and per frequency bucket.

    ``model`` needs a ``score(features) -> scores`` method. Means are
    accumulated in input query order, so reports are deterministic.
    """
    if not queries:
        raise ValueError("cannot evaluate an empty query set")
    ks = tuple(ks)
    per_query: list[dict] = []
    ties = 0
    for q in queries:
        ranked, tied = _ranked_labels(model.score(q.features), q.labels)
        ties += int(tied)
        row = {"query_id": q.query_id, "bucket": q.bucket, "zero_label": bool(q.labels.max() == 0)}
        for k in ks:
            row[f"ndcg@{k}"] = ndcg_at_k(ranked, k)
            row[f"err@{k}"] = err_at_k(ranked, k)
        per_query.append(row)

    def bucket_means(rows):
        ndcg = {}
        err = {}
        for k in ks:
            vals = [r[f"ndcg@{k}"] for r in rows if not r["zero_label"]]
            ndcg[k] = float(np.mean(vals)) if vals else float("nan")
            err[k] = float(np.mean([r[f"err@{k}"] for r in rows]))
        return ndcg, err

    ndcg, err = bucket_means(per_query)
    bucket_ndcg = {}
    bucket_err = {}
    for bucket in sorted({q.bucket for q in queries}):
        rows = [r for r in per_query if r["bucket"] == bucket]
        bucket_ndcg[bucket], bucket_err[bucket] = bucket_means(rows)

    return MetricReport(
        ks=ks,
        ndcg=ndcg,
        err=err,
        bucket_ndcg=bucket_ndcg,
        bucket_err=bucket_err,
        per_query=per_query,
        n_queries=len(queries),
        n_zero_label=sum(r["zero_label"] for r in per_query),
        n_score_ties=ties,
        metadata=dict(metadata or {}),
    )


def save_metric_report(path, report: MetricReport) -> None:
    """Long-form CSV: ``metric,k,bucket,mean,n_queries``."""
    n_by_bucket = {}
    for row in report.per_query:
        n_by_bucket[row["bucket"]] = n_by_bucket.get(row["bucket"], 0) + 1
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metric,k,bucket,mean,n_queries\n")
        for metric, overall, per_bucket in (
            ("ndcg", report.ndcg, report.bucket_ndcg),
            ("err", report.err, report.bucket_err),
        ):
            for k in report.ks:
                fh.write(f"{metric},{k},all,{'%.17g' % overall[k]},{report.n_queries}\n")
            for bucket in sorted(per_bucket):
                for k in report.ks:
                    fh.write(
                        f"{metric},{k},{bucket},{'%.17g' % per_bucket[bucket][k]},{n_by_bucket[bucket]}\n"
                    )


def save_per_query_metrics(path, report: MetricReport) -> None:
    cols = ["query_id", "bucket", "zero_label"] + [
        f"{m}@{k}" for m in ("ndcg", "err") for k in report.ks
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in report.per_query:
            out = []
            for c in cols:
                v = row[c]
                if isinstance(v, bool):
                    out.append(str(int(v)))
                elif isinstance(v, float):
                    out.append("%.17g" % v)
                else:
                    out.append(str(v))
            fh.write(",".join(out) + "\n")


# ---------------------------------------------------------------------------
# Monte Carlo unbiasedness check


@dataclass
class UnbiasednessResult:
    estimate: float
    truth: float
    relative_error: float
    num_draws: int
    weight_source: str


def unbiasedness_mc_check(
    world: SyntheticWorld,
    model,
    weight_source: str = "oracle",
    num_draws: int = 10_000,
    seed: int = 0,
    g: PositionPropModel | None = None,
    h: QueryPropModel | None = None,
    dmp: DmpTable | None = None,
) -> UnbiasednessResult:
    """Average the inverse-weighted click loss over independent click
    realizations and compare against the full-information loss.

    Per draw and query: the session-click indicator is drawn first;
    sessions without it contribute zero. Clicked ranks contribute their
    listwise cross entropy divided by the weight denominator. Sources:

    * ``oracle``: true (observation prob) * (session-click prob).
    * ``naive``: weights of one (quantifies the raw-click bias).
    * ``learned``: rank-1-relative ratios from trained g and h models.

    The same seed yields the same realizations, so estimators with
    different sources can be compared on identical draws.
    """
    rel = world.relevance_matrix()
    n = rel.shape[0]
    feats = np.concatenate([q.features for q in world.train], axis=0)
    scores = model.score(feats).reshape(n, LIST_SIZE)
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss_per_doc = -log_p

    truth = float((rel * loss_per_doc).sum())
    if truth == 0.0:
        raise ValueError("full-information loss is zero; nothing to compare against")

    p_obs = world.position_bias
    p_cq = world.query_propensity
    click_prob = p_obs[None, :] * rel

    weighted = None
    cp = None
    pos_part = None
    if weight_source == "oracle":
        weighted = loss_per_doc / (p_obs[None, :] * p_cq[:, None])
    elif weight_source == "naive":
        weighted = loss_per_doc
    elif weight_source == "learned":
        if g is None or h is None or dmp is None:
            raise ValueError("learned weights need g, h and the divergence table")
        pos_w = np.array([position_weight_ratio(g, k) for k in range(1, LIST_SIZE + 1)])
        cp = qcp_forward(h, dmp)
        pos_part = loss_per_doc * pos_w[None, :]
    else:
        raise ValueError(f"unknown weight source {weight_source!r}")

    rng = stream_rng(seed, "mc")
    total = 0.0
    for _ in range(num_draws):
        cq = rng.random(n) < p_cq
        clicks = (rng.random((n, LIST_SIZE)) < click_prob) & cq[:, None]
        if weighted is not None:
            total += float(weighted[clicks].sum())
        else:
            # the query-level ratio depends on the realized click pattern
            counts = clicks.sum(axis=1)
            has = counts > 0
            cs_cp = clicks @ cp
            qw = np.zeros(n)
            qw[has] = cp[0] * counts[has] / np.maximum(cs_cp[has], 1e-12)
            total += float((qw * (clicks * pos_part).sum(axis=1)).sum())
    estimate = total / num_draws
    return UnbiasednessResult(
        estimate=estimate,
        truth=truth,
        relative_error=abs(estimate - truth) / truth,
        num_draws=num_draws,
        weight_source=weight_source,
    )


# ---------------------------------------------------------------------------
# analyses


@dataclass
class PilotPartition:
    """Single-click sessions grouped by their click rank."""

    groups: dict[int, SessionSet]
    n_single_click: int
    n_multi_click: int
    n_no_click: int

    def proportions(self) -> dict[int, float]:
        if self.n_single_click == 0:
            return {k: 0.0 for k in self.groups}
        return {k: len(s) / self.n_single_click for k, s in self.groups.items()}

    def export(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for rank, group in self.groups.items():
            if len(group):
                save_sessions(os.path.join(out_dir, f"single_click_rank{rank}.tsv"), group)


def pilot_partition(sessions: SessionSet | Sequence[QuerySession]) -> PilotPartition:
    """Group single-click sessions by click rank; multi-click sessions are
    excluded from every group."""
    groups: dict[int, list[QuerySession]] = {k: [] for k in range(1, LIST_SIZE + 1)}
    multi = 0
    none = 0
    for s in sessions:
        if s.num_clicks == 1:
            rank = int(s.positions[np.flatnonzero(s.clicks)[0]])
            groups[rank].append(s)
        elif s.num_clicks == 0:
            none += 1
        else:
            multi += 1
    n_single = sum(len(g) for g in groups.values())
    provenance = getattr(sessions, "provenance", "loaded")
    return PilotPartition(
        groups={k: SessionSet(v, provenance) for k, v in groups.items()},
        n_single_click=n_single,
        n_multi_click=multi,
        n_no_click=none,
    )


def export_dmp_distributions(dmp: DmpTable, path) -> None:
    """Write the maximal-score-position table as CSV, rows in rank order,
    fallback (uniform) rows flagged."""
    save_dmp(path, dmp)


def export_click_weights(
    g: PositionPropModel, h: QueryPropModel, dmp: DmpTable, path, w_max: float = 10.0
) -> None:
    """Per rank: the position-only inverse weight and the combined weight
    (query-level ratio for a single click at that rank times the position
    ratio)."""
    cp = qcp_forward(h, dmp)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("position,position_weight,combined_weight\n")
        for k in range(1, LIST_SIZE + 1):
            pos_w = position_weight_ratio(g, k, w_max)
            combined = (cp[0] / max(cp[k - 1], 1e-12)) * pos_w
            fh.write(f"{k},{'%.17g' % pos_w},{'%.17g' % combined}\n")
