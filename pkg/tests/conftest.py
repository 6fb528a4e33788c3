import numpy as np
import pytest

from dualipw.dataset import (
    QuerySession,
    SessionSet,
    WorldConfig,
    generate_synthetic_world,
    simulate_clicks,
)


def make_session(query_id="q0", clicks=(1, 0, 0, 0, 0, 0, 0, 0, 0, 0), seed=0, bucket="unknown"):
    rng = np.random.default_rng(seed)
    return QuerySession(
        query_id=query_id,
        positions=np.arange(1, 11),
        features=rng.normal(size=(10, 14)),
        clicks=np.array(clicks),
        bucket=bucket,
    )


def make_session_set(n=6, seed=0):
    rng = np.random.default_rng(seed)
    sessions = []
    for i in range(n):
        clicks = np.zeros(10, dtype=int)
        clicks[rng.choice(10, size=rng.integers(1, 4), replace=False)] = 1
        sessions.append(make_session(query_id=f"q{i}", clicks=clicks, seed=seed + i))
    return SessionSet(sessions, provenance="loaded")


@pytest.fixture(scope="session")
def small_world():
    config = WorldConfig(num_queries=400, num_val_queries=60, num_test_queries=120)
    return generate_synthetic_world(config, seed=11)


@pytest.fixture(scope="session")
def small_simulation(small_world):
    return simulate_clicks(small_world, seed=11)
