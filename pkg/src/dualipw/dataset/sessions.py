"""Click-session and annotated-query data model, TSV loaders, batching.

Session TSV, one line per document, lines of a session contiguous with
positions ascending::

    query_id<TAB>position<TAB>click(0|1)<TAB>f1 ... f14 (space-separated)<TAB>bucket

Annotation TSV (the bucket column may be absent)::

    query_id<TAB>doc_id<TAB>label(0-4)<TAB>f1 ... f14<TAB>bucket

All files are UTF-8 with LF line endings and ``.`` decimal separators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from ..numkit.rng import stream_rng

__all__ = [
    "FEATURE_DIM",
    "LIST_SIZE",
    "BUCKETS",
    "DataFormatError",
    "SessionParseError",
    "AnnotationParseError",
    "QuerySession",
    "AnnotatedQuery",
    "SessionSet",
    "FilterStats",
    "load_sessions",
    "save_sessions",
    "filter_sessions",
    "load_annotations",
    "save_annotations",
    "batch_iter",
]

logger = logging.getLogger("dualipw.dataset")

FEATURE_DIM = 14
LIST_SIZE = 10
BUCKETS = ("high", "mid", "low", "unknown")


class DataFormatError(Exception):
    """A data file violates its documented format."""


class SessionParseError(DataFormatError):
    pass


class AnnotationParseError(DataFormatError):
    pass


@dataclass
class QuerySession:
    """One logged query: ranked documents, feature vectors, click bits.

    ``positions[i]`` is the 1-based rank of row ``i``; training requires
    the full list of 10 (see :func:`filter_sessions`).
    """

    query_id: str
    positions: np.ndarray  # (n,) int, ascending, within 1..10
    features: np.ndarray  # (n, 14) float64
    clicks: np.ndarray  # (n,) int, 0/1
    bucket: str = "unknown"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.clicks = np.asarray(self.clicks, dtype=np.int64)
        n = len(self.positions)
        if self.features.shape != (n, FEATURE_DIM):
            raise ValueError(
                f"session {self.query_id}: features shape {self.features.shape}, "
                f"expected ({n}, {FEATURE_DIM})"
            )
        if self.clicks.shape != (n,):
            raise ValueError(f"session {self.query_id}: clicks shape mismatch")
        if n:
            if self.positions.min() < 1 or self.positions.max() > LIST_SIZE:
                raise ValueError(f"session {self.query_id}: positions outside 1..{LIST_SIZE}")
            if np.any(np.diff(self.positions) <= 0):
                raise ValueError(f"session {self.query_id}: positions not strictly ascending")
        if not np.isin(self.clicks, (0, 1)).all():
            raise ValueError(f"session {self.query_id}: clicks must be 0 or 1")
        if not np.isfinite(self.features).all():
            raise ValueError(f"session {self.query_id}: non-finite feature value")
        if self.bucket not in BUCKETS:
            raise ValueError(f"session {self.query_id}: unknown bucket {self.bucket!r}")

    @property
    def num_docs(self) -> int:
        return len(self.positions)

    @property
    def num_clicks(self) -> int:
        return int(self.clicks.sum())


@dataclass
class AnnotatedQuery:
    """A query with graded candidates (grades 0-4) for evaluation."""

    query_id: str
    doc_ids: list[str]
    features: np.ndarray  # (n, 14)
    labels: np.ndarray  # (n,) int in 0..4
    bucket: str = "unknown"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.doc_ids)
        if n < 1:
            raise ValueError(f"query {self.query_id}: needs at least one candidate")
        if self.features.shape != (n, FEATURE_DIM) or self.labels.shape != (n,):
            raise ValueError(f"query {self.query_id}: candidate array shapes inconsistent")
        if self.labels.min() < 0 or self.labels.max() > 4:
            raise ValueError(f"query {self.query_id}: labels outside 0..4")
        if len(set(self.doc_ids)) != n:
            raise ValueError(f"query {self.query_id}: duplicate doc ids")
        if self.bucket not in BUCKETS:
            raise ValueError(f"query {self.query_id}: unknown bucket {self.bucket!r}")


@dataclass
class SessionSet:
    """An ordered collection of sessions plus where they came from."""

    sessions: list[QuerySession] = field(default_factory=list)
    provenance: str = "loaded"

    def __len__(self) -> int:
        return len(self.sessions)

    def __iter__(self) -> Iterator[QuerySession]:
        return iter(self.sessions)

    def __getitem__(self, idx) -> QuerySession:
        return self.sessions[idx]


@dataclass
class FilterStats:
    removed_short: int = 0
    removed_no_click: int = 0

    @property
    def removed(self) -> int:
        return self.removed_short + self.removed_no_click


def _fmt(x: float) -> str:
    return "%.17g" % x


def save_sessions(path, sessions: SessionSet | Sequence[QuerySession]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sessions:
            for i in range(s.num_docs):
                feats = " ".join(_fmt(v) for v in s.features[i])
                fh.write(f"{s.query_id}\t{s.positions[i]}\t{s.clicks[i]}\t{feats}\t{s.bucket}\n")


def load_sessions(path) -> SessionSet:
    """Parse a session TSV. Raises :class:`SessionParseError` naming the
    offending line on any malformed content."""
    sessions: list[QuerySession] = []
    seen_ids: set[str] = set()
    cur_id = None
    cur_rows: list[tuple[int, int, np.ndarray, str]] = []

    def flush():
        nonlocal cur_id, cur_rows
        if cur_id is None:
            return
        positions = np.array([r[0] for r in cur_rows])
        clicks = np.array([r[1] for r in cur_rows])
        feats = np.stack([r[2] for r in cur_rows])
        sessions.append(
            QuerySession(cur_id, positions, feats, clicks, bucket=cur_rows[0][3])
        )
        cur_id = None
        cur_rows = []

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise SessionParseError(
                    f"{path}:{lineno}: expected 5 tab-separated columns, got {len(parts)}"
                )
            qid, pos_s, click_s, feats_s, bucket = parts
            try:
                pos = int(pos_s)
                click = int(click_s)
                feats = np.array(feats_s.split(" "), dtype=np.float64)
            except ValueError as err:
                raise SessionParseError(f"{path}:{lineno}: {err}") from None
            if not 1 <= pos <= LIST_SIZE:
                raise SessionParseError(f"{path}:{lineno}: position {pos} outside 1..{LIST_SIZE}")
            if click not in (0, 1):
                raise SessionParseError(f"{path}:{lineno}: click must be 0 or 1, got {click_s}")
            if feats.shape != (FEATURE_DIM,):
                raise SessionParseError(
                    f"{path}:{lineno}: expected {FEATURE_DIM} features, got {feats.size}"
                )
            if not np.isfinite(feats).all():
                raise SessionParseError(f"{path}:{lineno}: non-finite feature value")
            if bucket not in BUCKETS:
                raise SessionParseError(f"{path}:{lineno}: unknown bucket {bucket!r}")
            if qid != cur_id:
                flush()
                if qid in seen_ids:
                    raise SessionParseError(
                        f"{path}:{lineno}: session {qid!r} reappears non-contiguously"
                    )
                seen_ids.add(qid)
                cur_id = qid
            elif cur_rows and pos <= cur_rows[-1][0]:
                raise SessionParseError(
                    f"{path}:{lineno}: positions not ascending within session {qid!r}"
                )
            try:
                cur_rows.append((pos, click, feats, bucket))
            except ValueError as err:
                raise SessionParseError(f"{path}:{lineno}: {err}") from None
    flush()
    if not sessions:
        logger.warning("no sessions found in %s", path)
    return SessionSet(sessions, provenance="loaded")


def filter_sessions(sset: SessionSet) -> tuple[SessionSet, FilterStats]:
    """Keep sessions with the full list of 10 results and at least one
    click; pure selection, surviving sessions are untouched."""
    stats = FilterStats()
    kept = []
    for s in sset:
        if s.num_docs != LIST_SIZE:
            stats.removed_short += 1
        elif s.num_clicks == 0:
            stats.removed_no_click += 1
        else:
            kept.append(s)
    if stats.removed:
        logger.info(
            "filtered %d sessions (%d short, %d without clicks), %d kept",
            stats.removed,
            stats.removed_short,
            stats.removed_no_click,
            len(kept),
        )
    return SessionSet(kept, provenance=sset.provenance), stats


def save_annotations(path, queries: Sequence[AnnotatedQuery]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in queries:
            for i, doc_id in enumerate(q.doc_ids):
                feats = " ".join(_fmt(v) for v in q.features[i])
                fh.write(f"{q.query_id}\t{doc_id}\t{q.labels[i]}\t{feats}\t{q.bucket}\n")


def load_annotations(path) -> list[AnnotatedQuery]:
    """Parse an annotation TSV, grouping rows by query id. A missing
    bucket column defaults every query to ``unknown``."""
    rows_by_query: dict[str, list[tuple[str, int, np.ndarray, str]]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) == 4:
                qid, doc_id, label_s, feats_s = parts
                bucket = "unknown"
            elif len(parts) == 5:
                qid, doc_id, label_s, feats_s, bucket = parts
            else:
                raise AnnotationParseError(
                    f"{path}:{lineno}: expected 4 or 5 tab-separated columns, got {len(parts)}"
                )
            try:
                label = int(label_s)
                feats = np.array(feats_s.split(" "), dtype=np.float64)
            except ValueError as err:
                raise AnnotationParseError(f"{path}:{lineno}: {err}") from None
            if not 0 <= label <= 4:
                raise AnnotationParseError(f"{path}:{lineno}: label {label} outside 0..4")
            if feats.shape != (FEATURE_DIM,):
                raise AnnotationParseError(
                    f"{path}:{lineno}: expected {FEATURE_DIM} features, got {feats.size}"
                )
            if bucket not in BUCKETS:
                raise AnnotationParseError(f"{path}:{lineno}: unknown bucket {bucket!r}")
            if qid not in rows_by_query:
                rows_by_query[qid] = []
                order.append(qid)
            elif any(r[0] == doc_id for r in rows_by_query[qid]):
                raise AnnotationParseError(
                    f"{path}:{lineno}: duplicate document {doc_id!r} for query {qid!r}"
                )
            rows_by_query[qid].append((doc_id, label, feats, bucket))

    queries = []
    for qid in order:
        rows = rows_by_query[qid]
        queries.append(
            AnnotatedQuery(
                query_id=qid,
                doc_ids=[r[0] for r in rows],
                features=np.stack([r[2] for r in rows]),
                labels=np.array([r[1] for r in rows]),
                bucket=rows[0][3],
            )
        )
    return queries


def batch_iter(
    sset: SessionSet | Sequence[QuerySession],
    batch_size: int,
    seed: int,
    epoch: int = 0,
) -> Iterator[list[QuerySession]]:
    """Shuffle once with the batching stream for this epoch, then yield
    batches; the final partial batch is yielded too."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    sessions = list(sset)
    rng = stream_rng(seed, "batching", index=epoch)
    order = rng.permutation(len(sessions))
    for start in range(0, len(sessions), batch_size):
        yield [sessions[i] for i in order[start : start + batch_size]]
