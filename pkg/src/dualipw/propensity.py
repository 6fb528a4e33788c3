"""Query-level and position-level click propensity estimation.

The query-level side works entirely on the 10 canonical single-click
sequences: for each one, the table of where a surrogate ranker's top
score lands (over logged sessions sharing that click pattern) is turned
into per-position log-ratio divergence features, encoded by an LSTM, and
calibrated with a softmax into a propensity for each pattern. Multi-click
sessions average the propensities of their clicked positions. The
position-level side is a plain vector of learnable logits, one per rank.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset.sessions import LIST_SIZE, DataFormatError, QuerySession, SessionSet
from .numkit import autodiff as ad
from .numkit.autodiff import Tensor
from .numkit.lstm import lstm_forward, lstm_param_shapes

__all__ = [
    "DMP_FLOOR",
    "DmpTable",
    "compute_dmp",
    "smooth_click_sequence",
    "log_ratio_features",
    "divergence_inputs",
    "QueryPropModel",
    "PositionPropModel",
    "qcp_forward",
    "query_propensity",
    "position_weight_ratio",
    "save_dmp",
    "load_dmp",
    "save_propensities",
]

logger = logging.getLogger("dualipw.propensity")

DMP_FLOOR = 1e-6


@dataclass
class DmpTable:
    """Row i: over single-click-at-rank-(i+1) sessions, the distribution of
    the rank holding the maximal surrogate score.

    Rows with no contributing sessions fall back to the uniform
    distribution and are flagged.
    """

    rows: np.ndarray  # (10, 10)
    counts: np.ndarray  # (10,) sessions per row
    tie_count: int = 0

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.rows.shape != (LIST_SIZE, LIST_SIZE) or self.counts.shape != (LIST_SIZE,):
            raise ValueError("divergence table must be 10x10 with 10 counts")
        if (self.rows < 0).any():
            raise ValueError("divergence table entries must be non-negative")
        if np.abs(self.rows.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("divergence table rows must sum to 1")

    @property
    def fallback_rows(self) -> np.ndarray:
        return self.counts == 0


def compute_dmp(sessions: SessionSet | Sequence[QuerySession], scores: np.ndarray) -> DmpTable:
    """Build the maximal-score-position table from single-click sessions.

    ``scores[i]`` holds the surrogate relevance scores for session i, in
    rank order. Argmax ties break toward the lowest rank (reading order)
    and are counted.
    """
    sessions = list(sessions)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(sessions), LIST_SIZE):
        raise ValueError(f"scores shape {scores.shape} does not match {len(sessions)} sessions")

    hits = np.zeros((LIST_SIZE, LIST_SIZE), dtype=np.int64)
    counts = np.zeros(LIST_SIZE, dtype=np.int64)
    ties = 0
    for session, s in zip(sessions, scores):
        if session.num_clicks != 1 or session.num_docs != LIST_SIZE:
            continue
        click_pos = int(np.flatnonzero(session.clicks)[0])
        top = int(np.argmax(s))  # argmax returns the first (lowest rank) on ties
        if (s == s[top]).sum() > 1:
            ties += 1
        counts[click_pos] += 1
        hits[click_pos, top] += 1

    rows = np.full((LIST_SIZE, LIST_SIZE), 1.0 / LIST_SIZE)
    nonzero = counts > 0
    rows[nonzero] = hits[nonzero] / counts[nonzero, None]
    if (~nonzero).any():
        logger.info(
            "no single-click sessions at ranks %s; rows fall back to uniform",
            [int(i) + 1 for i in np.flatnonzero(~nonzero)],
        )
    if ties:
        logger.info("%d argmax ties broken toward the lowest rank", ties)
    return DmpTable(rows=rows, counts=counts, tie_count=ties)


def smooth_click_sequence(cs: np.ndarray, tau: float) -> np.ndarray:
    """softmax(cs / tau): a near-hard probability vector for small tau."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = np.asarray(cs, dtype=np.float64) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_ratio_features(cs_smooth: np.ndarray, dmp_row: np.ndarray) -> np.ndarray:
    """t_i = cs'_i * log(cs'_i / max(row_i, floor)); zero entries contribute 0.

    When the row has full support, the features sum to KL(cs' || row).
    """
    cs_smooth = np.asarray(cs_smooth, dtype=np.float64)
    row = np.maximum(np.asarray(dmp_row, dtype=np.float64), DMP_FLOOR)
    out = np.zeros_like(cs_smooth)
    pos = cs_smooth > 0
    out[pos] = cs_smooth[pos] * np.log(cs_smooth[pos] / row[pos])
    return out


def divergence_inputs(dmp: DmpTable, tau: float) -> np.ndarray:
    """The (10 sequences, 10 steps) log-ratio input matrix for the
    query-propensity model; row i belongs to the single-click-at-rank-(i+1)
    sequence. Depends only on the table and tau, so it is a constant."""
    t = np.empty((LIST_SIZE, LIST_SIZE))
    for i in range(LIST_SIZE):
        cs = np.zeros(LIST_SIZE)
        cs[i] = 1.0
        t[i] = log_ratio_features(smooth_click_sequence(cs, tau), dmp.rows[i])
    return t


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class QueryPropModel:
    """LSTM encoder over the 10 divergence features plus a small head.

    Scalar inputs per step; the head is one hidden layer of the LSTM
    width with an exponential-linear activation, then a scalar output.
    """

    hidden_size: int
    layers: int
    tau: float
    params: dict[str, np.ndarray] = field(default_factory=dict)

    PREFIX = "h."

    def __post_init__(self):
        if self.hidden_size < 1 or self.layers < 1:
            raise ValueError("hidden_size and layers must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @classmethod
    def init(cls, rng: np.random.Generator, hidden_size: int = 8, layers: int = 1, tau: float = 0.1):
        model = cls(hidden_size=hidden_size, layers=layers, tau=tau)
        params: dict[str, np.ndarray] = {}
        for name, shape in lstm_param_shapes(1, hidden_size, layers, prefix=f"{cls.PREFIX}lstm").items():
            fan_in = shape[0] if len(shape) == 2 else hidden_size
            params[name] = _uniform_init(rng, shape, fan_in)
        params[f"{cls.PREFIX}ffn.w1"] = _uniform_init(rng, (hidden_size, hidden_size), hidden_size)
        params[f"{cls.PREFIX}ffn.b1"] = _uniform_init(rng, (hidden_size,), hidden_size)
        params[f"{cls.PREFIX}ffn.w2"] = _uniform_init(rng, (hidden_size, 1), hidden_size)
        params[f"{cls.PREFIX}ffn.b2"] = _uniform_init(rng, (1,), hidden_size)
        model.params = params
        return model

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray], tau: float = 0.1):
        wh = params[f"{cls.PREFIX}lstm0.wh"]
        hidden = wh.shape[0]
        layers = 1 + max(
            (int(k[len(cls.PREFIX) + 4]) for k in params if k.startswith(f"{cls.PREFIX}lstm")),
            default=0,
        )
        model = cls(hidden_size=hidden, layers=layers, tau=tau)
        model.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        return model

    def build_scores(self, t_params: dict[str, Tensor], t_matrix: np.ndarray) -> Tensor:
        """Tape for the 10 raw (pre-softmax) sequence scores."""
        steps = [ad.constant(t_matrix[:, j : j + 1]) for j in range(LIST_SIZE)]
        hs = lstm_forward(steps, t_params, self.hidden_size, self.layers, prefix=f"{self.PREFIX}lstm")
        hidden = ad.elu(ad.affine(hs[-1], t_params[f"{self.PREFIX}ffn.w1"], t_params[f"{self.PREFIX}ffn.b1"]))
        out = ad.affine(hidden, t_params[f"{self.PREFIX}ffn.w2"], t_params[f"{self.PREFIX}ffn.b2"])
        return ad.reshape(out, (LIST_SIZE,))

    def build_propensities(self, t_params: dict[str, Tensor], dmp: DmpTable) -> Tensor:
        return ad.softmax(self.build_scores(t_params, divergence_inputs(dmp, self.tau)))

    def propensities(self, dmp: DmpTable) -> np.ndarray:
        return qcp_forward(self, dmp)


def qcp_forward(model: QueryPropModel, dmp: DmpTable) -> np.ndarray:
    """Calibrated per-sequence propensities: positive, summing to 1."""
    with ad.no_grad():
        t_params = {k: ad.constant(v) for k, v in model.params.items()}
        return model.build_propensities(t_params, dmp).data


def query_propensity(cs: np.ndarray, cp: np.ndarray) -> float:
    """Propensity of an arbitrary click sequence: the mean of the
    single-click propensities at its clicked positions."""
    cs = np.asarray(cs)
    cp = np.asarray(cp, dtype=np.float64)
    if cs.shape != (LIST_SIZE,) or cp.shape != (LIST_SIZE,):
        raise ValueError("click sequence and propensity vector must have 10 entries")
    clicked = np.flatnonzero(cs)
    if clicked.size == 0:
        raise ValueError("click sequence has no clicks; filter sessions upstream")
    # left fold in rank order: a defined summation order keeps the mean exact
    total = 0.0
    for i in clicked:
        total += float(cp[i])
    return total / clicked.size


@dataclass
class PositionPropModel:
    """Ten learnable logits, one per rank; propensities are their softmax."""

    params: dict[str, np.ndarray] = field(default_factory=dict)

    PREFIX = "g."

    @classmethod
    def init(cls, rng: np.random.Generator | None = None):
        # zero logits = uniform propensities; the observation model starts flat
        return cls(params={f"{cls.PREFIX}logits": np.zeros(LIST_SIZE)})

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]):
        logits = np.asarray(params[f"{cls.PREFIX}logits"], dtype=np.float64)
        if logits.shape != (LIST_SIZE,):
            raise ValueError(f"position logits must have {LIST_SIZE} entries")
        return cls(params={f"{cls.PREFIX}logits": logits})

    @property
    def logits(self) -> np.ndarray:
        return self.params[f"{self.PREFIX}logits"]


def position_weight_ratio(g: PositionPropModel, k: int, w_max: float = 10.0) -> float:
    """Inverse-propensity weight for rank k relative to rank 1, reading the
    logits as softmax scores: exp(logit_1 - logit_k), clipped to [0, w_max]."""
    if not 1 <= k <= LIST_SIZE:
        raise ValueError(f"rank must lie in 1..{LIST_SIZE}, got {k}")
    logits = g.logits
    return float(np.clip(np.exp(logits[0] - logits[k - 1]), 0.0, w_max))


def save_dmp(path, dmp: DmpTable) -> None:
    """CSV rows, one per single-click sequence in rank order:
    ``sequence,count,fallback,p1..p10``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sequence,count,fallback," + ",".join(f"p{j}" for j in range(1, 11)) + "\n")
        for i in range(LIST_SIZE):
            probs = ",".join("%.17g" % v for v in dmp.rows[i])
            flag = int(dmp.counts[i] == 0)
            fh.write(f"{i + 1},{dmp.counts[i]},{flag},{probs}\n")


def load_dmp(path) -> DmpTable:
    rows = np.zeros((LIST_SIZE, LIST_SIZE))
    counts = np.zeros(LIST_SIZE, dtype=np.int64)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("sequence,count,fallback"):
            raise DataFormatError(f"{path}: unexpected header {header!r}")
        seen = 0
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 + LIST_SIZE:
                raise DataFormatError(f"{path}:{lineno}: expected {3 + LIST_SIZE} fields")
            try:
                idx = int(parts[0]) - 1
                counts[idx] = int(parts[1])
                rows[idx] = [float(v) for v in parts[3:]]
            except (ValueError, IndexError) as err:
                raise DataFormatError(f"{path}:{lineno}: {err}") from None
            seen += 1
        if seen != LIST_SIZE:
            raise DataFormatError(f"{path}: expected {LIST_SIZE} rows, got {seen}")
    return DmpTable(rows=rows, counts=counts)


def save_propensities(path, cp: np.ndarray) -> None:
    """CSV export of the calibrated sequence propensities: ``i,cp_i``."""
    cp = np.asarray(cp)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("position,propensity\n")
        for i in range(LIST_SIZE):
            fh.write(f"{i + 1},{'%.17g' % cp[i]}\n")
