"""Seed discipline: named, independent random streams from one run seed.

All randomness flows through Philox (a counter-based generator) keyed by
``SeedSequence(entropy=seed, spawn_key=(stream_id, index))``. The same
seed therefore yields the same stream on any platform, and the named
streams (world generation, click draws, parameter init, batching, Monte
Carlo draws) never interact.
"""

from __future__ import annotations

import numpy as np

__all__ = ["STREAMS", "stream_rng"]

STREAMS = {
    "world": 0,
    "clicks": 1,
    "init": 2,
    "batching": 3,
    "mc": 4,
}


def stream_rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """The ``index``-th generator of a named stream for this seed.

    ``index`` sub-divides a stream (per-epoch batching order, per-model
    initialization) without consuming state from its siblings.
    """
    if stream not in STREAMS:
        raise KeyError(f"unknown rng stream {stream!r}; expected one of {sorted(STREAMS)}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(STREAMS[stream], index))
    return np.random.Generator(np.random.Philox(ss))
