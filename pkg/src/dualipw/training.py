"""Loss construction and training orchestration.

Four methods share one listwise machinery: a click-weighted softmax
cross entropy over each session's 10 scores.

* ``naive``: raw clicks, no weighting.
* ``ipw_fixed``: clicks weighted by a fixed inverse position-propensity
  vector.
* ``dla``: position weights and relevance weights learned jointly, each
  model trained by the other's detached ratios.
* ``dualipw``: adds the learned query-level propensity; ranking model and
  query-propensity model update together from the rank loss (position
  ratios detached), then the position model updates from its own loss
  with everything else frozen.

All ratio weights are read as ratios of softmax-normalized scores, i.e.
exp of score differences, clipped to ``w_max``.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset.sessions import (
    FEATURE_DIM,
    LIST_SIZE,
    AnnotatedQuery,
    QuerySession,
    SessionSet,
    batch_iter,
    filter_sessions,
)
from .dataset.synthetic import OracleRecord
from .evalkit import mean_ndcg_at_k
from .numkit import autodiff as ad
from .numkit.adamw import AdamW, AdamWConfig, OptimizerError
from .numkit.autodiff import Tensor
from .numkit.checkpoint import load_checkpoint, save_checkpoint
from .numkit.graph import Graph
from .numkit.rng import stream_rng
from .propensity import (
    DmpTable,
    PositionPropModel,
    QueryPropModel,
    compute_dmp,
    divergence_inputs,
)

__all__ = [
    "METHODS",
    "RankingModel",
    "ModelBundle",
    "TrainConfig",
    "TrainingDivergedError",
    "CurvePoint",
    "CheckpointSet",
    "rank_softmax_ce",
    "naive_loss_graph",
    "ipw_fixed_loss_graph",
    "dla_loss_graph",
    "dualipw_rank_graph",
    "dualipw_prop_graph",
    "oracle_weighted_graph",
    "full_information_graph",
    "dla_step",
    "dualipw_rank_step",
    "dualipw_prop_step",
    "StepResult",
    "DlaStepResult",
    "train",
    "fit_surrogate_dmp",
    "save_curve",
    "load_curve",
]

logger = logging.getLogger("dualipw.training")

METHODS = ("naive", "ipw_fixed", "dla", "dualipw")

MIN_QUERY_PROPENSITY = 1e-9


class TrainingDivergedError(Exception):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, batch_ids: list[str], param_norms: dict[str, float]):
        self.batch_ids = batch_ids
        self.param_norms = param_norms
        super().__init__(
            f"{message}; last batch {batch_ids[:5]}{'...' if len(batch_ids) > 5 else ''}; "
            f"param norms {({k: round(v, 4) for k, v in list(param_norms.items())[:4]})}"
        )


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class RankingModel:
    """Feed-forward scorer: 14 features projected to 64, then 32, 16, 1,
    with exponential-linear activations between the dense layers."""

    params: dict[str, np.ndarray] = field(default_factory=dict)

    PREFIX = "f."
    LAYER_DIMS = ((FEATURE_DIM, 64), (64, 32), (32, 16), (16, 1))

    @classmethod
    def init(cls, rng: np.random.Generator):
        params = {}
        for i, (fan_in, fan_out) in enumerate(cls.LAYER_DIMS):
            params[f"{cls.PREFIX}l{i}.w"] = _uniform_init(rng, (fan_in, fan_out), fan_in)
            params[f"{cls.PREFIX}l{i}.b"] = _uniform_init(rng, (fan_out,), fan_in)
        return cls(params=params)

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]):
        model = cls(params={k: np.asarray(v, dtype=np.float64) for k, v in params.items()})
        for i, (fan_in, fan_out) in enumerate(cls.LAYER_DIMS):
            w = model.params.get(f"{cls.PREFIX}l{i}.w")
            if w is None or w.shape != (fan_in, fan_out):
                raise ValueError(f"ranking model layer {i} missing or misshapen")
        return model

    def build_scores(self, t_params: dict[str, Tensor], feats: Tensor) -> Tensor:
        """Tape producing one score per feature row."""
        h = feats
        last = len(self.LAYER_DIMS) - 1
        for i in range(len(self.LAYER_DIMS)):
            h = ad.affine(h, t_params[f"{self.PREFIX}l{i}.w"], t_params[f"{self.PREFIX}l{i}.b"])
            if i != last:
                h = ad.elu(h)
        return ad.reshape(h, (feats.data.shape[0],))

    def score(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        with ad.no_grad():
            t_params = {k: ad.constant(v) for k, v in self.params.items()}
            return self.build_scores(t_params, ad.constant(features)).data


@dataclass
class ModelBundle:
    """The three models of one run; serializes to a single checkpoint."""

    f: RankingModel
    g: PositionPropModel
    h: QueryPropModel

    def all_params(self) -> dict[str, np.ndarray]:
        return {**self.f.params, **self.g.params, **self.h.params}

    def clone(self) -> "ModelBundle":
        return ModelBundle(
            f=RankingModel(params={k: v.copy() for k, v in self.f.params.items()}),
            g=PositionPropModel(params={k: v.copy() for k, v in self.g.params.items()}),
            h=copy.deepcopy(self.h),
        )

    def save(self, path) -> None:
        save_checkpoint(path, self.all_params())

    @classmethod
    def load(cls, path, tau: float = 0.1) -> "ModelBundle":
        params = load_checkpoint(path)
        by_prefix: dict[str, dict[str, np.ndarray]] = {"f.": {}, "g.": {}, "h.": {}}
        for k, v in params.items():
            for prefix in by_prefix:
                if k.startswith(prefix):
                    by_prefix[prefix][k] = v
                    break
            else:
                raise ValueError(f"checkpoint parameter {k!r} has no model prefix")
        return cls(
            f=RankingModel.from_params(by_prefix["f."]),
            g=PositionPropModel.from_params(by_prefix["g."]),
            h=QueryPropModel.from_params(by_prefix["h."], tau=tau),
        )

    @classmethod
    def init(cls, seed: int, lstm_hidden: int = 8, lstm_layers: int = 1, tau: float = 0.1):
        return cls(
            f=RankingModel.init(stream_rng(seed, "init", 0)),
            g=PositionPropModel.init(stream_rng(seed, "init", 1)),
            h=QueryPropModel.init(
                stream_rng(seed, "init", 2), hidden_size=lstm_hidden, layers=lstm_layers, tau=tau
            ),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; identical configs and seeds give identical runs.

    The published full-scale learning-rate range is 2e-6..6e-6; small
    synthetic runs want larger steps, so the rate is validated only for
    positivity.
    """

    method: str = "dualipw"
    lr: float = 4e-6
    lr_g: float | None = None
    lr_h: float | None = None
    batch_size: int = 30
    epochs: int = 2
    list_size: int = LIST_SIZE
    tau: float = 0.1
    lstm_hidden: int = 8
    lstm_layers: int = 1
    w_max: float = 10.0
    seed: int = 0
    validation_cadence: int = 500
    oracle_mode: bool = False
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    surrogate_epochs: int = 1
    ipw_propensities: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.list_size != LIST_SIZE:
            raise ValueError(f"list_size is fixed at {LIST_SIZE}")
        if min(self.lr, self.tau, self.w_max) <= 0:
            raise ValueError("lr, tau and w_max must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.surrogate_epochs < 1:
            raise ValueError("batch_size, epochs and surrogate_epochs must be >= 1")
        if self.validation_cadence < 1:
            raise ValueError("validation_cadence must be >= 1")
        if self.lstm_hidden not in (4, 8, 16) or self.lstm_layers not in (1, 2):
            raise ValueError("lstm_hidden must be one of (4, 8, 16) and lstm_layers 1 or 2")


# ---------------------------------------------------------------------------
# loss construction


def rank_softmax_ce(scores: Tensor, clicks, weights) -> Tensor:
    """Weighted listwise cross entropy for one session:
    minus the sum over clicked ranks of weight * log softmax(scores)."""
    clicks = np.asarray(clicks, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    logp = ad.log_softmax(scores)
    return -ad.reduce_sum(ad.mul(ad.constant(clicks * weights), logp))


def _batch_arrays(batch: Sequence[QuerySession]) -> tuple[np.ndarray, np.ndarray]:
    feats = np.concatenate([s.features for s in batch], axis=0)
    clicks = np.stack([s.clicks for s in batch]).astype(np.float64)
    return feats, clicks


def _position_ratios(logits: np.ndarray, w_max: float) -> np.ndarray:
    """Detached rank-1-relative weights from position logits."""
    return np.clip(np.exp(logits[0] - logits), 0.0, w_max)


def _score_ratios(scores: np.ndarray, w_max: float) -> np.ndarray:
    """Detached rank-1-relative relevance weights from session scores (B, 10)."""
    return np.clip(np.exp(scores[:, :1] - scores), 0.0, w_max)


def _batched_ce(scores: Tensor, mask: np.ndarray) -> Tensor:
    """(B,) rowwise weighted cross entropies from (B, 10) scores."""
    logp = ad.log_softmax(scores)
    return -ad.reduce_sum(ad.mul(ad.constant(mask), logp), axis=1)


def _weighted_rank_graph(f: RankingModel, batch, weights: np.ndarray) -> Graph:
    """Mean over the batch of click-and-weight-masked cross entropies."""
    feats, clicks = _batch_arrays(batch)
    mask = clicks * weights

    def build(inputs, params):
        scores = ad.reshape(f.build_scores(params, inputs["features"]), clicks.shape)
        return ad.reduce_mean(_batched_ce(scores, mask))

    graph = Graph(build, name="rank_loss")
    graph.static_inputs = {"features": feats}
    return graph


def naive_loss_graph(f: RankingModel, batch) -> Graph:
    return _weighted_rank_graph(f, batch, np.ones(LIST_SIZE))


def ipw_fixed_loss_graph(f: RankingModel, batch, propensities: np.ndarray, w_max: float = 10.0) -> Graph:
    """Clicks weighted by the fixed vector p(observe rank 1)/p(observe rank k)."""
    propensities = np.asarray(propensities, dtype=np.float64)
    if propensities.shape != (LIST_SIZE,):
        raise ValueError(f"propensity vector must have {LIST_SIZE} entries")
    if (propensities <= 0).any():
        raise ValueError("propensities must be strictly positive")
    weights = np.clip(propensities[0] / propensities, 0.0, w_max)
    return _weighted_rank_graph(f, batch, weights)


def oracle_weighted_graph(
    f: RankingModel, batch, records: Sequence[OracleRecord]
) -> Graph:
    """Clicks weighted by true inverse propensities
    1 / (p(observed) * p(session clicks)) from the simulation sidecar."""
    inv = np.stack(
        [1.0 / (r.observation * max(r.p_any_click, MIN_QUERY_PROPENSITY)) for r in records]
    )
    feats, clicks = _batch_arrays(batch)
    mask = clicks * inv

    def build(inputs, params):
        scores = ad.reshape(f.build_scores(params, inputs["features"]), clicks.shape)
        return ad.reduce_mean(_batched_ce(scores, mask))

    graph = Graph(build, name="oracle_rank_loss")
    graph.static_inputs = {"features": feats}
    return graph


def full_information_graph(f: RankingModel, features: np.ndarray, relevance: np.ndarray) -> Graph:
    """The global listwise loss against true relevance probabilities:
    every document contributes with weight p(relevant)."""
    relevance = np.asarray(relevance, dtype=np.float64)

    def build(inputs, params):
        scores = ad.reshape(f.build_scores(params, inputs["features"]), relevance.shape)
        return ad.reduce_mean(_batched_ce(scores, relevance))

    graph = Graph(build, name="full_information_loss")
    graph.static_inputs = {"features": np.asarray(features, dtype=np.float64).reshape(-1, FEATURE_DIM)}
    return graph


def dla_loss_graph(f: RankingModel, g: PositionPropModel, batch, w_max: float = 10.0) -> Graph:
    """Joint graph with outputs ``loss_f`` (clicks weighted by detached
    position ratios) and ``loss_g`` (position logits' cross entropy
    weighted by detached relevance ratios); their sum backpropagates each
    model from its own loss only.

    Both ratio weights are frozen at construction time, which is what
    "detached" means: each model trains against the other's current
    values, and the objective is an explicit function of the live
    parameters only.
    """
    feats, clicks = _batch_arrays(batch)
    mask_f = clicks * _position_ratios(g.logits, w_max)
    rel_w = _score_ratios(f.score(feats).reshape(clicks.shape), w_max)
    mask_g = clicks * rel_w

    def build(inputs, params):
        scores = ad.reshape(f.build_scores(params, inputs["features"]), clicks.shape)
        loss_f = ad.reduce_mean(_batched_ce(scores, mask_f))
        logp_g = ad.log_softmax(params[f"{PositionPropModel.PREFIX}logits"])
        per_session = -ad.reduce_sum(ad.mul(ad.constant(mask_g), logp_g), axis=1)
        loss_g = ad.reduce_mean(per_session)
        return {"loss_f": loss_f, "loss_g": loss_g, "loss": ad.add(loss_f, loss_g)}

    graph = Graph(build, name="dla_loss")
    graph.static_inputs = {"features": feats}
    return graph


def _query_weight_tensor(
    h: QueryPropModel,
    t_params: dict[str, Tensor],
    t_matrix: np.ndarray,
    numerator: float,
    clicks: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """(B,) session weights cp(click-at-1) / cp(session sequence), with
    gradient flowing into the query-propensity model; also returns the
    calibrated propensity vector.

    The numerator is a frozen scalar: it is a shared normalizer, and
    letting its gradient through hands the propensity model a degenerate
    direction (sinking the click-at-1 propensity shrinks every weight at
    once). Gradient reaches the model through each session's own
    propensity.
    """
    cp = ad.softmax(h.build_scores(t_params, t_matrix))
    counts = clicks.sum(axis=1, keepdims=True)
    clicked_sum = ad.matmul(ad.constant(clicks), ad.reshape(cp, (LIST_SIZE, 1)))
    mean_cp = ad.clip(ad.div(clicked_sum, ad.constant(counts)), MIN_QUERY_PROPENSITY, np.inf)
    weight = ad.reshape(ad.div(ad.constant(numerator), mean_cp), (clicks.shape[0],))
    return weight, cp


def dualipw_rank_graph(
    f: RankingModel,
    h: QueryPropModel,
    g: PositionPropModel,
    dmp: DmpTable,
    batch,
    w_max: float = 10.0,
) -> Graph:
    """Rank loss with both inverse weights: the query-level ratio keeps
    gradient into the query-propensity model through each session's own
    propensity, while the position ratios, the frozen position model, and
    the shared numerator are constants."""
    feats, clicks = _batch_arrays(batch)
    mask = clicks * _position_ratios(g.logits, w_max)
    t_matrix = divergence_inputs(dmp, h.tau)
    numerator = float(h.propensities(dmp)[0])

    def build(inputs, params):
        scores = ad.reshape(f.build_scores(params, inputs["features"]), clicks.shape)
        ce = _batched_ce(scores, mask)
        weight, cp = _query_weight_tensor(h, params, t_matrix, numerator, clicks)
        loss = ad.reduce_mean(ad.mul(weight, ce))
        return {"loss": loss, "cp": cp}

    graph = Graph(build, name="dual_rank_loss")
    graph.static_inputs = {"features": feats}
    return graph


def dualipw_prop_graph(
    g: PositionPropModel,
    f: RankingModel,
    h: QueryPropModel,
    dmp: DmpTable,
    batch,
    w_max: float = 10.0,
) -> Graph:
    """Position-propensity loss: cross entropy over the position logits at
    clicked ranks, weighted by detached relevance ratios and the detached
    query-level ratio (the query-propensity model is frozen here)."""
    feats, clicks = _batch_arrays(batch)
    scores = f.score(feats).reshape(clicks.shape)
    rel_w = _score_ratios(scores, w_max)
    cp = h.propensities(dmp)
    counts = clicks.sum(axis=1)
    mean_cp = np.maximum((clicks @ cp) / counts, MIN_QUERY_PROPENSITY)
    query_w = cp[0] / mean_cp

    def build(inputs, params):
        logits = params[f"{PositionPropModel.PREFIX}logits"]
        logp_g = ad.log_softmax(logits)
        per_session = -ad.reduce_sum(ad.mul(ad.constant(clicks * rel_w), logp_g), axis=1)
        return ad.reduce_mean(ad.mul(ad.constant(query_w), per_session))

    graph = Graph(build, name="dual_prop_loss")
    graph.static_inputs = {"features": feats}
    return graph


# ---------------------------------------------------------------------------
# single optimization steps (losses plus gradients, optimizers not applied)


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]


@dataclass
class DlaStepResult:
    loss_f: float
    loss_g: float
    grads: dict[str, np.ndarray]


def dla_step(f: RankingModel, g: PositionPropModel, batch, w_max: float = 10.0) -> DlaStepResult:
    graph = dla_loss_graph(f, g, batch, w_max)
    params = {**f.params, **g.params}
    out, grads = graph.evaluate(graph.static_inputs, params, output="loss")
    return DlaStepResult(loss_f=float(out["loss_f"]), loss_g=float(out["loss_g"]), grads=grads)


def dualipw_rank_step(
    f: RankingModel,
    h: QueryPropModel,
    g: PositionPropModel,
    dmp: DmpTable,
    batch,
    w_max: float = 10.0,
) -> StepResult:
    """Simultaneous gradients for the ranking and query-propensity models;
    the position model's parameters come back with exactly zero gradient."""
    graph = dualipw_rank_graph(f, h, g, dmp, batch, w_max)
    params = {**f.params, **h.params, **g.params}
    out, grads = graph.evaluate(graph.static_inputs, params, output="loss")
    if out["cp"].min() < MIN_QUERY_PROPENSITY:
        logger.warning("query propensity below %g clamped", MIN_QUERY_PROPENSITY)
    return StepResult(loss=float(out["loss"]), grads=grads)


def dualipw_prop_step(
    g: PositionPropModel,
    f: RankingModel,
    h: QueryPropModel,
    dmp: DmpTable,
    batch,
    w_max: float = 10.0,
) -> StepResult:
    """Gradient for the position model only; ranking and query-propensity
    parameters come back with exactly zero gradient."""
    graph = dualipw_prop_graph(g, f, h, dmp, batch, w_max)
    params = {**g.params, **f.params, **h.params}
    loss, grads = graph.backward(graph.static_inputs, params, output="loss")
    return StepResult(loss=loss, grads=grads)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class CurvePoint:
    step: int
    epoch: int
    loss_f: float
    loss_g: float | None
    val_ndcg10: float


@dataclass
class CheckpointSet:
    best: ModelBundle
    final: ModelBundle
    curve: list[CurvePoint]
    best_step: int
    best_val_ndcg10: float
    dmp: DmpTable | None = None

    def save(self, out_dir) -> None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        self.best.save(os.path.join(out_dir, "best.ckpt"))
        self.final.save(os.path.join(out_dir, "final.ckpt"))
        save_curve(os.path.join(out_dir, "curve.csv"), self.curve)


def save_curve(path, curve: Sequence[CurvePoint]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,epoch,loss_f,loss_g,val_ndcg10\n")
        for p in curve:
            loss_g = "" if p.loss_g is None else "%.17g" % p.loss_g
            fh.write(f"{p.step},{p.epoch},{'%.17g' % p.loss_f},{loss_g},{'%.17g' % p.val_ndcg10}\n")


def load_curve(path) -> list[CurvePoint]:
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            line = line.strip()
            if not line:
                continue
            step, epoch, loss_f, loss_g, val = line.split(",")
            points.append(
                CurvePoint(
                    step=int(step),
                    epoch=int(epoch),
                    loss_f=float(loss_f),
                    loss_g=float(loss_g) if loss_g else None,
                    val_ndcg10=float(val),
                )
            )
    return points


def fit_surrogate_dmp(config: TrainConfig, sessions: SessionSet) -> DmpTable:
    """Train a fresh dual-learning surrogate on the same sessions, score
    them, and build the maximal-score-position table from the single-click
    subset. The surrogate never shares initialization with the main run."""
    f = RankingModel.init(stream_rng(config.seed, "init", 3))
    g = PositionPropModel.init(stream_rng(config.seed, "init", 4))
    opt_f = AdamW(f.params, _adam(config, config.lr))
    opt_g = AdamW(g.params, _adam(config, config.lr_g or config.lr))
    for epoch in range(config.surrogate_epochs):
        for batch in batch_iter(sessions, config.batch_size, config.seed, epoch=1000 + epoch):
            result = dla_step(f, g, batch, config.w_max)
            opt_f.step({k: v for k, v in result.grads.items() if k in f.params})
            opt_g.step({k: v for k, v in result.grads.items() if k in g.params})
    scores = np.stack([f.score(s.features) for s in sessions])
    return compute_dmp(sessions, scores)


def _adam(config: TrainConfig, lr: float) -> AdamWConfig:
    return AdamWConfig(
        lr=lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def train(
    config: TrainConfig,
    sessions: SessionSet,
    validation: Sequence[AnnotatedQuery],
    sidecar: Sequence[OracleRecord] | None = None,
    dmp: DmpTable | None = None,
) -> CheckpointSet:
    """Run one training job; deterministic in (config, seed).

    The best bundle is selected by validation nDCG@10, evaluated every
    ``validation_cadence`` batches and at each epoch end.
    """
    sessions, _ = filter_sessions(sessions)
    if len(sessions) == 0:
        raise ValueError("no usable sessions after filtering")
    if not validation:
        raise ValueError("validation queries are required for model selection")

    records_by_id: dict[str, OracleRecord] = {}
    if sidecar is not None:
        records_by_id = {r.query_id: r for r in sidecar}

    if config.method == "dualipw" and not config.oracle_mode and dmp is None:
        logger.info("fitting surrogate for the divergence table")
        dmp = fit_surrogate_dmp(config, sessions)

    ipw_vector: np.ndarray | None = None
    if config.method == "ipw_fixed":
        if config.ipw_propensities is not None:
            ipw_vector = np.asarray(config.ipw_propensities, dtype=np.float64)
        elif records_by_id:
            ipw_vector = next(iter(records_by_id.values())).observation
        else:
            raise ValueError("ipw_fixed needs a propensity vector (config or sidecar)")

    bundle = ModelBundle.init(
        config.seed, lstm_hidden=config.lstm_hidden, lstm_layers=config.lstm_layers, tau=config.tau
    )
    f, g, h = bundle.f, bundle.g, bundle.h
    opt_f = AdamW(f.params, _adam(config, config.lr))
    opt_g = AdamW(g.params, _adam(config, config.lr_g or config.lr))
    opt_h = AdamW(h.params, _adam(config, config.lr_h or config.lr))

    curve: list[CurvePoint] = []
    best = bundle.clone()
    best_val = -1.0
    best_step = 0
    step = 0
    acc_f: list[float] = []
    acc_g: list[float] = []

    def validate(epoch: int) -> None:
        nonlocal best, best_val, best_step
        val = mean_ndcg_at_k(f, validation, k=10)
        loss_f = float(np.mean(acc_f)) if acc_f else float("nan")
        loss_g = float(np.mean(acc_g)) if acc_g else None
        curve.append(CurvePoint(step=step, epoch=epoch, loss_f=loss_f, loss_g=loss_g, val_ndcg10=val))
        acc_f.clear()
        acc_g.clear()
        if val > best_val:
            best = bundle.clone()
            best_val = val
            best_step = step

    def oracle_batch(batch) -> list[OracleRecord]:
        try:
            return [records_by_id[s.query_id] for s in batch]
        except KeyError as err:
            raise ValueError(f"session {err} has no sidecar oracle record") from None

    last_ids: list[str] = []
    try:
        for epoch in range(config.epochs):
            for batch in batch_iter(sessions, config.batch_size, config.seed, epoch=epoch):
                last_ids = [s.query_id for s in batch]
                if config.oracle_mode:
                    if not records_by_id:
                        raise ValueError("oracle_mode requires the simulation sidecar")
                    graph = oracle_weighted_graph(f, batch, oracle_batch(batch))
                    loss, grads = graph.backward(graph.static_inputs, {**f.params})
                    opt_f.step(grads)
                    acc_f.append(loss)
                elif config.method == "naive":
                    graph = naive_loss_graph(f, batch)
                    loss, grads = graph.backward(graph.static_inputs, {**f.params})
                    opt_f.step(grads)
                    acc_f.append(loss)
                elif config.method == "ipw_fixed":
                    graph = ipw_fixed_loss_graph(f, batch, ipw_vector, config.w_max)
                    loss, grads = graph.backward(graph.static_inputs, {**f.params})
                    opt_f.step(grads)
                    acc_f.append(loss)
                elif config.method == "dla":
                    result = dla_step(f, g, batch, config.w_max)
                    opt_f.step({k: v for k, v in result.grads.items() if k in f.params})
                    opt_g.step({k: v for k, v in result.grads.items() if k in g.params})
                    acc_f.append(result.loss_f)
                    acc_g.append(result.loss_g)
                else:  # dualipw
                    rank = dualipw_rank_step(f, h, g, dmp, batch, config.w_max)
                    opt_f.step({k: v for k, v in rank.grads.items() if k in f.params})
                    opt_h.step({k: v for k, v in rank.grads.items() if k in h.params})
                    prop = dualipw_prop_step(g, f, h, dmp, batch, config.w_max)
                    opt_g.step({k: v for k, v in prop.grads.items() if k in g.params})
                    acc_f.append(rank.loss)
                    acc_g.append(prop.loss)
                step += 1
                if step % config.validation_cadence == 0:
                    validate(epoch)
            validate(epoch)
    except (ad.NonFiniteError, OptimizerError) as err:
        norms = {k: float(np.linalg.norm(v)) for k, v in bundle.all_params().items()}
        raise TrainingDivergedError(str(err), last_ids, norms) from err

    return CheckpointSet(
        best=best,
        final=bundle,
        curve=curve,
        best_step=best_step,
        best_val_ndcg10=best_val,
        dmp=dmp,
    )
