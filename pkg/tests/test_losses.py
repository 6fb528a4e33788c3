"""Loss values against hand computations, reduction identities between
methods, and the freeze contracts of the two-step update."""

import numpy as np
import pytest

from conftest import make_session, make_session_set
from dualipw.dataset.synthetic import OracleRecord
from dualipw.numkit import autodiff as ad
from dualipw.numkit import finite_diff_check
from dualipw.numkit.rng import stream_rng
from dualipw.propensity import DmpTable, PositionPropModel, QueryPropModel
from dualipw.training import (
    RankingModel,
    dla_loss_graph,
    dla_step,
    dualipw_prop_graph,
    dualipw_prop_step,
    dualipw_rank_graph,
    dualipw_rank_step,
    full_information_graph,
    ipw_fixed_loss_graph,
    naive_loss_graph,
    oracle_weighted_graph,
    rank_softmax_ce,
)


def models(seed=0, hidden=4):
    f = RankingModel.init(stream_rng(seed, "init", 0))
    g = PositionPropModel.init()
    h = QueryPropModel.init(stream_rng(seed, "init", 2), hidden_size=hidden, layers=1, tau=0.1)
    return f, g, h


def random_table(seed=0):
    rng = np.random.default_rng(seed)
    return DmpTable(rows=rng.dirichlet(np.ones(10), size=10), counts=rng.integers(1, 30, size=10))


class TestRankSoftmaxCE:
    def test_uniform_scores_single_click(self):
        loss = rank_softmax_ce(ad.constant(np.zeros(10)), np.eye(10)[0], np.ones(10))
        assert float(loss.data) == pytest.approx(np.log(10.0), abs=1e-12)

    def test_linear_in_weights(self):
        scores = ad.constant(np.random.default_rng(0).normal(size=10))
        clicks = np.eye(10)[4]
        one = float(rank_softmax_ce(scores, clicks, np.ones(10)).data)
        two = float(rank_softmax_ce(scores, clicks, np.full(10, 2.0)).data)
        assert two == pytest.approx(2.0 * one, rel=1e-14)

    def test_two_clicks_hand_computed(self):
        scores = np.array([1.0, 0.5, 0.0, -0.5, -1.0, 0.2, 0.1, -0.2, 0.3, 0.0])
        clicks = np.zeros(10)
        clicks[0] = clicks[3] = 1
        log_probs = scores - np.log(np.exp(scores).sum())
        expected = -(log_probs[0] + log_probs[3])
        loss = rank_softmax_ce(ad.constant(scores), clicks, np.ones(10))
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)


class TestDlaLosses:
    def test_uniform_position_model_reduces_to_naive(self):
        f, g, _ = models()
        batch = list(make_session_set(5))
        dla = dla_loss_graph(f, g, batch)
        naive = naive_loss_graph(f, batch)
        loss_dla = dla.forward(dla.static_inputs, {**f.params, **g.params})["loss_f"]
        loss_naive = naive.forward(naive.static_inputs, f.params)["loss"]
        assert abs(float(loss_dla) - float(loss_naive)) < 1e-12

    def test_constant_scorer_gives_unit_relevance_weights(self):
        f, g, _ = models()
        for key in f.params:
            f.params[key][:] = 0.0  # all scores identical
        g.logits[:] = np.random.default_rng(0).normal(size=10)
        batch = list(make_session_set(4))
        dla = dla_loss_graph(f, g, batch)
        out = dla.forward(dla.static_inputs, {**f.params, **g.params})
        # with unit weights, the propensity loss is the plain click-masked
        # cross entropy over the position logits
        clicks = np.stack([s.clicks for s in batch]).astype(float)
        logp = g.logits - np.log(np.exp(g.logits).sum())
        expected = float(np.mean(-(clicks * logp).sum(axis=1)))
        assert float(out["loss_g"]) == pytest.approx(expected, abs=1e-12)

    def test_hand_computed_single_session(self):
        f, g, _ = models(seed=2)
        g.logits[:] = np.linspace(1.0, -1.0, 10)
        session = make_session("q", clicks=(0, 1, 0, 0, 1, 0, 0, 0, 0, 0), seed=3)
        dla = dla_loss_graph(f, g, [session], w_max=10.0)
        out = dla.forward(dla.static_inputs, {**f.params, **g.params})

        scores = f.score(session.features)
        logp = scores - np.log(np.exp(scores).sum())
        pos_w = np.clip(np.exp(g.logits[0] - g.logits), 0, 10.0)
        expected_f = -(pos_w[1] * logp[1] + pos_w[4] * logp[4])
        rel_w = np.clip(np.exp(scores[0] - scores), 0, 10.0)
        logp_g = g.logits - np.log(np.exp(g.logits).sum())
        expected_g = -(rel_w[1] * logp_g[1] + rel_w[4] * logp_g[4])
        assert float(out["loss_f"]) == pytest.approx(expected_f, abs=1e-12)
        assert float(out["loss_g"]) == pytest.approx(expected_g, abs=1e-12)

    def test_gradients_separated_by_loss(self):
        f, g, _ = models(seed=4)
        batch = list(make_session_set(3))
        result = dla_step(f, g, batch)
        assert set(result.grads) == set(f.params) | set(g.params)
        assert any(np.abs(result.grads[k]).max() > 0 for k in f.params)
        assert np.abs(result.grads["g.logits"]).max() > 0


class TestDualRankLoss:
    def test_uniform_propensities_reduce_to_dla_rank_loss(self):
        f, g, h = models(seed=5)
        for key in h.params:
            h.params[key][:] = 0.0  # calibrated propensities become uniform
        g.logits[:] = np.random.default_rng(1).normal(size=10) * 0.5
        batch = list(make_session_set(6))
        table = random_table()
        dual = dualipw_rank_graph(f, h, g, table, batch)
        dla = dla_loss_graph(f, g, batch)
        loss_dual = dual.forward(dual.static_inputs, {**f.params, **h.params, **g.params})["loss"]
        loss_dla = dla.forward(dla.static_inputs, {**f.params, **g.params})["loss_f"]
        assert abs(float(loss_dual) - float(loss_dla)) < 1e-12

    def test_click_at_rank_one_session_weight_is_one(self):
        f, g, h = models(seed=6)
        batch = [make_session("q", clicks=(1, 0, 0, 0, 0, 0, 0, 0, 0, 0))]
        table = random_table(2)
        dual = dualipw_rank_graph(f, h, g, table, batch)
        dla = dla_loss_graph(f, g, batch)
        loss_dual = dual.forward(dual.static_inputs, {**f.params, **h.params, **g.params})["loss"]
        loss_dla = dla.forward(dla.static_inputs, {**f.params, **g.params})["loss_f"]
        assert abs(float(loss_dual) - float(loss_dla)) < 1e-12

    def test_freeze_contract_zero_gradient_for_position_model(self):
        f, g, h = models(seed=7)
        result = dualipw_rank_step(f, h, g, random_table(3), list(make_session_set(4)))
        np.testing.assert_array_equal(result.grads["g.logits"], np.zeros(10))
        assert any(np.abs(result.grads[k]).max() > 0 for k in f.params)
        assert any(np.abs(result.grads[k]).max() > 0 for k in h.params)

    def test_end_to_end_finite_differences(self):
        f, g, h = models(seed=8)
        batch = list(make_session_set(2))
        table = random_table(4)
        graph = dualipw_rank_graph(f, h, g, table, batch)
        fh = {**f.params, **h.params}
        err_h = finite_diff_check(graph, graph.static_inputs, fh, detached=set(f.params))
        assert err_h.max_rel_error < 1e-4


class TestDualPropLoss:
    def test_constant_scorer_reduces_to_query_weighted_ce(self):
        f, g, h = models(seed=9)
        for key in f.params:
            f.params[key][:] = 0.0
        batch = list(make_session_set(5))
        table = random_table(5)
        graph = dualipw_prop_graph(g, f, h, table, batch)
        loss = graph.forward(graph.static_inputs, {**g.params, **f.params, **h.params})["loss"]

        cp = h.propensities(table)
        clicks = np.stack([s.clicks for s in batch]).astype(float)
        qw = cp[0] * clicks.sum(1) / (clicks @ cp)
        logp = g.logits - np.log(np.exp(g.logits).sum())
        expected = float(np.mean(qw * -(clicks * logp).sum(axis=1)))
        assert float(loss) == pytest.approx(expected, abs=1e-12)

    def test_uniform_propensities_reduce_to_dla_prop_loss(self):
        f, g, h = models(seed=10)
        for key in h.params:
            h.params[key][:] = 0.0
        batch = list(make_session_set(4))
        graph = dualipw_prop_graph(g, f, h, random_table(6), batch)
        dla = dla_loss_graph(f, g, batch)
        loss_dual = graph.forward(graph.static_inputs, {**g.params, **f.params, **h.params})["loss"]
        loss_dla = dla.forward(dla.static_inputs, {**f.params, **g.params})["loss_g"]
        assert abs(float(loss_dual) - float(loss_dla)) < 1e-12

    def test_freeze_contract_gradients_only_for_position_model(self):
        f, g, h = models(seed=11)
        result = dualipw_prop_step(g, f, h, random_table(7), list(make_session_set(4)))
        assert np.abs(result.grads["g.logits"]).max() > 0
        for key in list(f.params) + list(h.params):
            np.testing.assert_array_equal(result.grads[key], np.zeros_like(result.grads[key]))

    def test_position_gradient_matches_finite_differences(self):
        f, g, h = models(seed=12)
        graph = dualipw_prop_graph(g, f, h, random_table(8), list(make_session_set(3)))
        assert finite_diff_check(graph, graph.static_inputs, g.params).max_rel_error < 1e-4


class TestFixedIPW:
    def test_uniform_propensities_equal_naive(self):
        f, _, _ = models(seed=13)
        batch = list(make_session_set(5))
        ipw = ipw_fixed_loss_graph(f, batch, np.full(10, 0.25))
        naive = naive_loss_graph(f, batch)
        a = ipw.forward(ipw.static_inputs, f.params)["loss"]
        b = naive.forward(naive.static_inputs, f.params)["loss"]
        assert abs(float(a) - float(b)) < 1e-12

    def test_inverse_rank_weights(self):
        f, _, _ = models(seed=14)
        prop = 1.0 / np.arange(1, 11)
        batch = [make_session("q", clicks=(0, 1, 0, 0, 0, 0, 0, 0, 0, 0), seed=1)]
        graph = ipw_fixed_loss_graph(f, batch, prop)
        scores = f.score(batch[0].features)
        logp = scores - np.log(np.exp(scores).sum())
        assert float(graph.forward(graph.static_inputs, f.params)["loss"]) == pytest.approx(
            -2.0 * logp[1], abs=1e-12
        )

    def test_hand_set_batch(self):
        f, _, _ = models(seed=15)
        prop = np.linspace(1.0, 0.2, 10)
        batch = list(make_session_set(3, seed=7))
        graph = ipw_fixed_loss_graph(f, batch, prop, w_max=10.0)
        total = 0.0
        for s in batch:
            scores = f.score(s.features)
            logp = scores - np.log(np.exp(scores).sum())
            weights = np.clip(prop[0] / prop, 0, 10.0)
            total += -(s.clicks * weights * logp).sum()
        assert float(graph.forward(graph.static_inputs, f.params)["loss"]) == pytest.approx(
            total / 3, abs=1e-12
        )

    def test_zero_propensity_rejected(self):
        f, _, _ = models()
        prop = np.full(10, 0.5)
        prop[3] = 0.0
        with pytest.raises(ValueError):
            ipw_fixed_loss_graph(f, list(make_session_set(2)), prop)


class TestOracleAndFullInformation:
    def test_oracle_weights_applied_per_session(self):
        f, _, _ = models(seed=16)
        session = make_session("q", clicks=(1, 0, 0, 0, 1, 0, 0, 0, 0, 0))
        record = OracleRecord(
            query_id="q",
            p_any_click=0.5,
            any_click_draw=1,
            observation=1.0 / np.arange(1, 11),
            relevance=np.full(10, 0.5),
        )
        graph = oracle_weighted_graph(f, [session], [record])
        scores = f.score(session.features)
        logp = scores - np.log(np.exp(scores).sum())
        expected = -(logp[0] / (1.0 * 0.5) + logp[4] / (0.2 * 0.5))
        assert float(graph.forward(graph.static_inputs, f.params)["loss"]) == pytest.approx(
            expected, abs=1e-12
        )

    def test_full_information_weights_by_relevance(self):
        f, _, _ = models(seed=17)
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(2, 10, 14))
        rel = rng.uniform(size=(2, 10))
        graph = full_information_graph(f, feats.reshape(-1, 14), rel)
        total = 0.0
        for i in range(2):
            scores = f.score(feats[i])
            logp = scores - np.log(np.exp(scores).sum())
            total += -(rel[i] * logp).sum()
        assert float(graph.forward(graph.static_inputs, f.params)["loss"]) == pytest.approx(
            total / 2, abs=1e-12
        )


class TestWeightPositivity:
    def test_every_click_weight_positive_bounded(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            f, g, h = models(seed=seed)
            g.logits[:] = rng.normal(size=10) * 2
            for key in h.params:
                h.params[key][:] = rng.normal(size=h.params[key].shape) * 0.5
            table = random_table(seed)
            cp = h.propensities(table)
            assert (cp > 0).all()
            pos_w = np.clip(np.exp(g.logits[0] - g.logits), 0, 10.0)
            assert (pos_w > 0).all() and pos_w.max() <= 10.0
            query_w = cp[0] / cp
            combined_max = query_w.max() * 10.0
            assert np.isfinite(combined_max)
            assert (query_w * pos_w > 0).all()
            assert (query_w * pos_w <= combined_max + 1e-12).all()
