"""Synthetic worlds with known bias parameters, and click simulation.

The generative story per query: each document has a relevance latent and
an independent nuisance latent, both embedded as fixed directions in the
14-dim feature space (plus isotropic noise), so a linear probe of the
features predicts relevance up to configurable noise. True relevance
probability squashes the latent with a per-query shift, which makes some
queries uniformly rich in relevant results and others poor. The logging
policy orders documents by a mix of the relevance and nuisance latents
(or at random), so position correlates with a feature-visible but
partially wrong signal, the situation debiasing has to undo.

Clicks follow a two-level process: the whole session first draws
"receives any click" with probability rising in the total relevance of
the list, then each position clicks independently with position-bias
times relevance. Sessions without clicks are dropped, as in production
logs, and every oracle quantity is retained.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from ..numkit.rng import stream_rng
from .sessions import (
    FEATURE_DIM,
    LIST_SIZE,
    AnnotatedQuery,
    DataFormatError,
    QuerySession,
    SessionSet,
)

__all__ = [
    "BiasConfig",
    "WorldConfig",
    "SyntheticQuery",
    "SyntheticWorld",
    "OracleRecord",
    "SimulationStats",
    "SimulationResult",
    "generate_synthetic_world",
    "simulate_clicks",
    "position_bias_vector",
    "saturation_propensity",
    "relevance_grades",
    "save_sidecar",
    "load_sidecar",
]


@dataclass(frozen=True)
class BiasConfig:
    """Oracle bias parameters: position-bias exponent and saturation rate.

    Observation probability at rank k is (1/k)**eta. The probability that
    a session receives any click is 1 - exp(-saturation_rate * total
    relevance of the list), so richer lists saturate toward 1.
    """

    eta: float = 1.0
    saturation_rate: float = 0.35

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.saturation_rate <= 0:
            raise ValueError(f"saturation_rate must be > 0, got {self.saturation_rate}")


@dataclass(frozen=True)
class WorldConfig:
    num_queries: int
    num_val_queries: int = 0
    num_test_queries: int = 0
    docs_per_query: int = LIST_SIZE
    # p(relevant) = rel_ceiling * sigmoid(rel_scale * (latent + hidden noise) + query shift)
    rel_scale: float = 1.0
    rel_ceiling: float = 0.6
    query_shift_mean: float = -2.8
    query_shift_sd: float = 0.7
    # a fraction of queries is uniformly rich in relevant results: their
    # shift concentrates near saturated_shift instead of the base prior
    saturated_frac: float = 0.35
    saturated_shift: float = 0.3
    # how strongly the nuisance latent enters relevance, with opposite
    # signs in the two query strata (+ for saturated, - for the rest);
    # one global scorer then cannot fit both, so the training mixture
    # matters and saturation-driven selection becomes harmful
    nuisance_flip: float = 0.5
    rel_hidden_noise: float = 0.3
    feature_noise: float = 0.3
    # logging policy score = mix * relevance latent + (1 - mix) * nuisance + jitter
    policy_strength: float = 1.0
    policy_mix: float = 0.45
    policy_noise: float = 0.2
    bias: BiasConfig = field(default_factory=BiasConfig)

    def __post_init__(self):
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.num_val_queries < 0 or self.num_test_queries < 0:
            raise ValueError("validation/test query counts must be >= 0")
        if self.docs_per_query != LIST_SIZE:
            raise ValueError(f"docs_per_query is fixed at {LIST_SIZE}")
        if self.rel_scale <= 0 or self.query_shift_sd < 0:
            raise ValueError("rel_scale must be positive and query_shift_sd non-negative")
        if not 0.0 < self.rel_ceiling <= 1.0:
            raise ValueError("rel_ceiling must lie in (0, 1]")
        if min(self.rel_hidden_noise, self.feature_noise, self.policy_noise) < 0:
            raise ValueError("noise levels must be >= 0")
        if not 0.0 <= self.policy_strength <= 1.0:
            raise ValueError("policy_strength must lie in [0, 1]")
        if not 0.0 <= self.policy_mix <= 1.0:
            raise ValueError("policy_mix must lie in [0, 1]")
        if not 0.0 <= self.saturated_frac <= 1.0:
            raise ValueError("saturated_frac must lie in [0, 1]")


def config_hash(cfg) -> str:
    """Short stable digest of a config dataclass, for provenance tags."""
    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:10]


@dataclass
class SyntheticQuery:
    query_id: str
    features: np.ndarray  # (10, 14), logged order
    relevance: np.ndarray  # (10,), p(relevant) in logged order
    bucket: str = "unknown"


@dataclass
class SyntheticWorld:
    """Generated queries with every oracle quantity kept losslessly."""

    config: WorldConfig
    seed: int
    train: list[SyntheticQuery]
    val: list[AnnotatedQuery]
    test: list[AnnotatedQuery]
    position_bias: np.ndarray  # (10,), p(observed at rank k)
    query_propensity: np.ndarray  # (num_queries,), p(any click) per train query
    probe_direction: np.ndarray  # (14,), the relevance-bearing feature direction

    def relevance_matrix(self) -> np.ndarray:
        return np.stack([q.relevance for q in self.train])

    def with_bias(self, bias: BiasConfig) -> "SyntheticWorld":
        """The same world under different oracle bias parameters."""
        rel = self.relevance_matrix()
        return replace(
            self,
            config=replace(self.config, bias=bias),
            position_bias=position_bias_vector(bias.eta),
            query_propensity=saturation_propensity(rel, bias.saturation_rate),
        )


def position_bias_vector(eta: float) -> np.ndarray:
    k = np.arange(1, LIST_SIZE + 1, dtype=np.float64)
    return (1.0 / k) ** eta


def saturation_propensity(relevance: np.ndarray, rate: float) -> np.ndarray:
    """p(any click) = 1 - exp(-rate * sum of relevance), rowwise."""
    return 1.0 - np.exp(-rate * np.asarray(relevance).sum(axis=-1))


def relevance_grades(relevance: np.ndarray) -> np.ndarray:
    """Discretize relevance probabilities to 0-4 by equal-width bins."""
    return np.minimum((np.asarray(relevance) * 5).astype(np.int64), 4)


def _assign_buckets(n: int, rng: np.random.Generator) -> list[str]:
    # queries get a random popularity rank; top 10% high, next 30% mid
    ranks = rng.permutation(n)
    out = []
    for r in ranks:
        if r < max(1, round(0.1 * n)) and n >= 3:
            out.append("high")
        elif r < max(2, round(0.4 * n)) and n >= 3:
            out.append("mid")
        else:
            out.append("low")
    return out


def generate_synthetic_world(config: WorldConfig, seed: int) -> SyntheticWorld:
    """Deterministic in (config, seed); all draws come from the world stream."""
    rng = stream_rng(seed, "world")
    basis = np.linalg.qr(rng.normal(size=(FEATURE_DIM, 2)))[0]
    probe = basis[:, 0]  # relevance-bearing direction
    nuisance_dir = basis[:, 1]  # policy-visible but relevance-free direction

    def make_queries(n: int, tag: str):
        queries = []
        buckets = _assign_buckets(n, rng)
        for idx in range(n):
            latent = rng.normal(size=LIST_SIZE)
            nuisance = rng.normal(size=LIST_SIZE)
            saturated = rng.random() < config.saturated_frac
            if saturated:
                shift = config.saturated_shift + 0.3 * rng.normal()
                tilt = config.nuisance_flip
            else:
                shift = config.query_shift_mean + config.query_shift_sd * rng.normal()
                tilt = -config.nuisance_flip
            hidden = config.rel_hidden_noise * rng.normal(size=LIST_SIZE)
            rel_latent = latent + tilt * nuisance + hidden
            rel = config.rel_ceiling / (1.0 + np.exp(-(config.rel_scale * rel_latent + shift)))
            rel = np.clip(rel, 1e-4, 1 - 1e-4)
            feats = (
                latent[:, None] * probe[None, :]
                + nuisance[:, None] * nuisance_dir[None, :]
                + config.feature_noise * rng.normal(size=(LIST_SIZE, FEATURE_DIM))
            )
            if rng.random() < config.policy_strength:
                score = (
                    config.policy_mix * latent
                    + (1.0 - config.policy_mix) * nuisance
                    + config.policy_noise * rng.normal(size=LIST_SIZE)
                )
                order = np.argsort(-score, kind="stable")
            else:
                order = rng.permutation(LIST_SIZE)
            queries.append(
                SyntheticQuery(
                    query_id=f"{tag}-{idx:06d}",
                    features=feats[order],
                    relevance=rel[order],
                    bucket=buckets[idx],
                )
            )
        return queries

    train = make_queries(config.num_queries, "q")
    val = [_annotate(q) for q in make_queries(config.num_val_queries, "val")]
    test = [_annotate(q) for q in make_queries(config.num_test_queries, "test")]

    rel = np.stack([q.relevance for q in train])
    return SyntheticWorld(
        config=config,
        seed=seed,
        train=train,
        val=val,
        test=test,
        position_bias=position_bias_vector(config.bias.eta),
        query_propensity=saturation_propensity(rel, config.bias.saturation_rate),
        probe_direction=probe,
    )


def _annotate(q: SyntheticQuery) -> AnnotatedQuery:
    return AnnotatedQuery(
        query_id=q.query_id,
        doc_ids=[f"{q.query_id}-d{i}" for i in range(LIST_SIZE)],
        features=q.features,
        labels=relevance_grades(q.relevance),
        bucket=q.bucket,
    )


@dataclass
class OracleRecord:
    """Sidecar line for one kept session: the quantities an oracle-weighted
    training or unbiasedness check needs."""

    query_id: str
    p_any_click: float
    any_click_draw: int
    observation: np.ndarray  # (10,)
    relevance: np.ndarray  # (10,)


@dataclass
class SimulationStats:
    """Pre-filter aggregates over every generated session.

    ``clicks_per_position`` counts realized clicks; the two expectation
    vectors are the matching oracle targets (one conditioned on realized
    session-click draws, one fully marginal).
    """

    n_queries: int
    n_kept: int
    n_dropped: int
    clicks_per_position: np.ndarray  # (10,) realized counts
    expected_clicks_per_position: np.ndarray  # (10,) sum of cq_draw * p_obs * p_rel
    marginal_ctr: np.ndarray  # (10,) mean of p_any_click * p_obs * p_rel
    click_count_histogram: np.ndarray  # (11,) sessions by number of clicks

    def click_mix(self) -> dict[str, float]:
        """Proportions of single/double/more-than-two clicks among clicked sessions."""
        clicked = self.click_count_histogram[1:].sum()
        if clicked == 0:
            return {"single": 0.0, "double": 0.0, "more": 0.0}
        return {
            "single": self.click_count_histogram[1] / clicked,
            "double": self.click_count_histogram[2] / clicked,
            "more": self.click_count_histogram[3:].sum() / clicked,
        }


@dataclass
class SimulationResult:
    sessions: SessionSet
    sidecar: list[OracleRecord]
    stats: SimulationStats


def simulate_clicks(
    world: SyntheticWorld, bias_config: BiasConfig | None = None, seed: int = 0
) -> SimulationResult:
    """Draw one click realization per train query and keep clicked sessions.

    Per query: the session-click indicator is Bernoulli in the query
    propensity; given it, each position clicks independently with
    probability (position bias) * (relevance). The kept sessions pass the
    standard filter (full list, at least one click) by construction, and
    the sidecar is index-aligned with them.
    """
    if bias_config is not None and bias_config != world.config.bias:
        world = world.with_bias(bias_config)
    rng = stream_rng(seed, "clicks")

    rel = world.relevance_matrix()
    n = rel.shape[0]
    p_obs = world.position_bias
    p_cq = world.query_propensity
    probs = p_obs[None, :] * rel

    cq_draw = rng.random(n) < p_cq
    clicks = (rng.random((n, LIST_SIZE)) < probs) & cq_draw[:, None]
    counts = clicks.sum(axis=1)
    kept = counts > 0

    stats = SimulationStats(
        n_queries=n,
        n_kept=int(kept.sum()),
        n_dropped=int(n - kept.sum()),
        clicks_per_position=clicks.sum(axis=0).astype(np.float64),
        expected_clicks_per_position=(cq_draw[:, None] * probs).sum(axis=0),
        marginal_ctr=(p_cq[:, None] * probs).mean(axis=0),
        click_count_histogram=np.bincount(counts, minlength=LIST_SIZE + 1).astype(np.float64),
    )

    positions = np.arange(1, LIST_SIZE + 1)
    sessions = []
    sidecar = []
    for i in np.flatnonzero(kept):
        q = world.train[i]
        sessions.append(
            QuerySession(
                query_id=q.query_id,
                positions=positions,
                features=q.features,
                clicks=clicks[i].astype(np.int64),
                bucket=q.bucket,
            )
        )
        sidecar.append(
            OracleRecord(
                query_id=q.query_id,
                p_any_click=float(p_cq[i]),
                any_click_draw=1,
                observation=p_obs.copy(),
                relevance=rel[i].copy(),
            )
        )

    provenance = f"simulated(seed={seed}, config={config_hash(world.config)})"
    return SimulationResult(SessionSet(sessions, provenance), sidecar, stats)


def save_sidecar(path, records: Sequence[OracleRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            obs = " ".join("%.17g" % v for v in r.observation)
            rel = " ".join("%.17g" % v for v in r.relevance)
            fh.write(f"{r.query_id}\t{'%.17g' % r.p_any_click}\t{r.any_click_draw}\t{obs}\t{rel}\n")


def load_sidecar(path) -> list[OracleRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataFormatError(f"{path}:{lineno}: expected 5 columns, got {len(parts)}")
            try:
                obs = np.array(parts[3].split(" "), dtype=np.float64)
                rel = np.array(parts[4].split(" "), dtype=np.float64)
                record = OracleRecord(
                    query_id=parts[0],
                    p_any_click=float(parts[1]),
                    any_click_draw=int(parts[2]),
                    observation=obs,
                    relevance=rel,
                )
            except ValueError as err:
                raise DataFormatError(f"{path}:{lineno}: {err}") from None
            if obs.shape != (LIST_SIZE,) or rel.shape != (LIST_SIZE,):
                raise DataFormatError(f"{path}:{lineno}: oracle vectors must have 10 entries")
            records.append(record)
    return records
