"""Numerical self-checks: the gradient suite and the unbiasedness check.

The gradient suite builds seeded random fixtures (models, a small session
batch, a random divergence table) and compares backward gradients with
central finite differences for every model and every training loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .dataset.sessions import FEATURE_DIM, LIST_SIZE, QuerySession
from .dataset.synthetic import BiasConfig, WorldConfig, generate_synthetic_world
from .evalkit import UnbiasednessResult, unbiasedness_mc_check
from .numkit import autodiff as ad
from .numkit.graph import Graph, finite_diff_check
from .numkit.rng import stream_rng
from .propensity import DmpTable, PositionPropModel, QueryPropModel
from .training import (
    RankingModel,
    _weighted_rank_graph,
    dla_loss_graph,
    dualipw_prop_graph,
    dualipw_rank_graph,
    naive_loss_graph,
)

__all__ = ["GRAD_TOLERANCE", "GradSuiteResult", "gradient_suite", "unbiasedness_suite"]

logger = logging.getLogger("dualipw.checks")

GRAD_TOLERANCE = 1e-4


@dataclass
class GradSuiteResult:
    fixture_seed: int
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < GRAD_TOLERANCE


def _random_fixture(seed: int):
    rng = stream_rng(seed, "init", 99)
    f = RankingModel.init(stream_rng(seed, "init", 0))
    g = PositionPropModel.init()
    g.params["g.logits"][:] = 0.3 * rng.normal(size=LIST_SIZE)
    h = QueryPropModel.init(stream_rng(seed, "init", 2), hidden_size=4, layers=1, tau=0.1)

    batch = []
    for i in range(2):
        clicks = np.zeros(LIST_SIZE, dtype=np.int64)
        clicks[rng.choice(LIST_SIZE, size=rng.integers(1, 4), replace=False)] = 1
        batch.append(
            QuerySession(
                query_id=f"fx{seed}-{i}",
                positions=np.arange(1, LIST_SIZE + 1),
                features=rng.normal(size=(LIST_SIZE, FEATURE_DIM)),
                clicks=clicks,
            )
        )

    rows = rng.dirichlet(np.ones(LIST_SIZE), size=LIST_SIZE)
    dmp = DmpTable(rows=rows, counts=rng.integers(1, 50, size=LIST_SIZE))
    return f, g, h, batch, dmp


def gradient_suite(num_fixtures: int = 20, seed: int = 0) -> list[GradSuiteResult]:
    """Finite-difference checks for the three models and the three
    training losses on random fixtures; every error must sit below 1e-4."""
    results = []
    for i in range(num_fixtures):
        f, g, h, batch, dmp = _random_fixture(seed + i)
        errors: dict[str, float] = {}

        graph = naive_loss_graph(f, batch[:1])
        errors["ranking_model"] = finite_diff_check(
            graph, graph.static_inputs, f.params
        ).max_rel_error

        clicks = np.stack([s.clicks for s in batch]).astype(np.float64)

        def g_build(inputs, params):
            logp = ad.log_softmax(params["g.logits"])
            return -ad.reduce_mean(ad.reduce_sum(ad.mul(ad.constant(clicks), logp), axis=1))

        errors["position_model"] = finite_diff_check(Graph(g_build), {}, g.params).max_rel_error

        probe = stream_rng(seed + i, "init", 98).normal(size=LIST_SIZE)

        def h_build(inputs, params):
            cp = h.build_propensities(params, dmp)
            return ad.reduce_sum(ad.mul(ad.constant(probe), cp))

        errors["query_model"] = finite_diff_check(Graph(h_build), {}, h.params).max_rel_error

        dla = dla_loss_graph(f, g, batch)
        fg = {**f.params, **g.params}
        errors["dual_learning_loss"] = max(
            finite_diff_check(
                dla, dla.static_inputs, fg, output="loss_f", detached=set(g.params)
            ).max_rel_error,
            finite_diff_check(
                dla, dla.static_inputs, fg, output="loss_g", detached=set(f.params)
            ).max_rel_error,
        )

        # joint rank loss: sweep the query model on the full graph; for the
        # ranking model, sweep the numerically identical graph with the
        # query weights frozen at the evaluation point (they do not depend
        # on ranking parameters, so the gradients agree exactly)
        rank = dualipw_rank_graph(f, h, g, dmp, batch)
        fh = {**f.params, **h.params}
        err_h = finite_diff_check(
            rank, rank.static_inputs, fh, detached=set(f.params)
        ).max_rel_error
        cp0 = h.propensities(dmp)
        counts = clicks.sum(axis=1)
        qw0 = cp0[0] * counts / np.maximum(clicks @ cp0, 1e-12)
        pos_w = np.clip(np.exp(g.logits[0] - g.logits), 0.0, 10.0)
        frozen = _weighted_rank_graph(f, batch, pos_w[None, :] * qw0[:, None])
        base = rank.forward(rank.static_inputs, fh)["loss"]
        frozen_base = frozen.forward(frozen.static_inputs, f.params)["loss"]
        if abs(float(base) - float(frozen_base)) > 1e-12 * max(1.0, abs(float(base))):
            raise AssertionError("frozen-weight rank graph disagrees with the joint graph")
        err_f = finite_diff_check(frozen, frozen.static_inputs, f.params).max_rel_error
        errors["dual_rank_loss"] = max(err_f, err_h)

        prop = dualipw_prop_graph(g, f, h, dmp, batch)
        errors["dual_prop_loss"] = finite_diff_check(
            prop, prop.static_inputs, g.params
        ).max_rel_error

        results.append(GradSuiteResult(fixture_seed=seed + i, errors=errors))
    return results


def unbiasedness_suite(
    num_queries: int = 200,
    num_draws: int = 10_000,
    saturation_rate: float = 0.1,
    seed: int = 0,
) -> tuple[UnbiasednessResult, UnbiasednessResult]:
    """Oracle-weighted vs unweighted estimates of the global loss on a
    small world with heterogeneous saturation, over identical draws."""
    bias = BiasConfig(eta=1.0, saturation_rate=saturation_rate)
    config = replace(_small_world_config(num_queries), bias=bias)
    world = generate_synthetic_world(config, seed=seed)
    model = RankingModel.init(stream_rng(seed, "init", 7))
    oracle = unbiasedness_mc_check(world, model, "oracle", num_draws=num_draws, seed=seed)
    naive = unbiasedness_mc_check(world, model, "naive", num_draws=num_draws, seed=seed)
    return oracle, naive


def _small_world_config(num_queries: int) -> WorldConfig:
    return WorldConfig(num_queries=num_queries)
