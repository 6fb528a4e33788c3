"""Core tape ops: values, hand gradients, the finite-difference oracle,
stop-gradient and error contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualipw.numkit import Graph, NonFiniteError, ShapeError, finite_diff_check
from dualipw.numkit import autodiff as ad


class TestForwardValues:
    def test_affine_identity(self):
        out = ad.affine(ad.constant([[1.0, 2.0]]), ad.constant(np.eye(2)), ad.constant(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_softmax_symmetry(self):
        out = ad.softmax(ad.constant([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_elu_negative_one(self):
        out = ad.elu(ad.constant(-1.0))
        assert out.data == pytest.approx(np.exp(-1.0) - 1.0, abs=1e-15)

    def test_log_softmax_matches_composition(self):
        x = np.random.default_rng(0).normal(size=(4, 6))
        fused = ad.log_softmax(ad.constant(x)).data
        composed = np.log(ad.softmax(ad.constant(x)).data)
        np.testing.assert_allclose(fused, composed, atol=1e-12)

    def test_concat_narrow_roundtrip(self):
        a = ad.constant(np.arange(6.0).reshape(2, 3))
        b = ad.constant(np.arange(4.0).reshape(2, 2))
        joined = ad.concat([a, b], axis=1)
        back = ad.narrow(joined, 1, 0, 3)
        np.testing.assert_array_equal(back.data, a.data)


class TestBackward:
    def test_hand_gradient_sum_of_matmul(self):
        # loss = sum(W @ x) with x all ones: dloss/dW is all ones
        w = ad.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
        x = ad.constant(np.ones((2, 1)))
        ad.backward(ad.reduce_sum(ad.matmul(w, x)))
        np.testing.assert_array_equal(w.grad, np.ones((2, 2)))

    def test_unused_parameter_gets_no_gradient(self):
        used = ad.parameter(np.ones(3))
        unused = ad.parameter(np.ones(3))
        ad.backward(ad.reduce_sum(ad.mul(used, ad.constant([1.0, 2.0, 3.0]))))
        assert unused.grad is None
        np.testing.assert_array_equal(used.grad, [1.0, 2.0, 3.0])

    def test_detached_leaf_receives_zero_gradient(self):
        def build(inputs, params):
            return ad.reduce_sum(ad.mul(params["a"], params["b"]))

        _, grads = Graph(build).backward({}, {"a": np.ones(3), "b": np.full(3, 2.0)}, detached={"b"})
        np.testing.assert_array_equal(grads["a"], np.full(3, 2.0))
        np.testing.assert_array_equal(grads["b"], np.zeros(3))

    def test_detach_blocks_flow_inside_graph(self):
        p = ad.parameter(np.array(2.0))
        loss = ad.mul(p.detach(), p)  # only the live factor carries gradient
        ad.backward(loss)
        assert p.grad == pytest.approx(2.0)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            ad.backward(ad.parameter(np.ones(3)))

    def test_elu_subgradient_at_zero_is_one(self):
        x = ad.parameter(np.array(0.0))
        ad.backward(ad.elu(x))
        assert x.grad == pytest.approx(1.0)

    def test_backward_twice_resets_accumulators(self):
        p = ad.parameter(np.ones(2))
        loss = ad.reduce_sum(ad.mul(p, p))
        ad.backward(loss)
        first = p.grad.copy()
        ad.backward(loss)
        np.testing.assert_array_equal(p.grad, first)


class TestFiniteDifferenceOracle:
    def _random_graph(self, seed):
        rng = np.random.default_rng(seed)
        params = {
            "w1": rng.normal(size=(5, 4)),
            "b1": rng.normal(size=(4,)),
            "w2": rng.normal(size=(4, 3)),
        }
        inputs = {"x": rng.normal(size=(6, 5))}

        def build(i, p):
            hidden = ad.elu(ad.affine(i["x"], p["w1"], p["b1"]))
            out = ad.matmul(ad.sigmoid(hidden), p["w2"])
            probs = ad.log_softmax(ad.tanh(out))
            return ad.reduce_mean(ad.reduce_sum(probs, axis=1))

        return Graph(build), inputs, params

    @pytest.mark.parametrize("seed", range(5))
    def test_random_graphs_pass(self, seed):
        graph, inputs, params = self._random_graph(seed)
        assert finite_diff_check(graph, inputs, params).max_rel_error < 1e-4

    def test_ops_with_broadcast_and_reduction(self):
        rng = np.random.default_rng(3)
        params = {"scale": rng.normal(size=(1, 4)), "shift": rng.normal(size=(4,))}
        inputs = {"x": rng.normal(size=(5, 4))}

        def build(i, p):
            y = ad.div(ad.mul(i["x"], p["scale"]), ad.exp(p["shift"]))
            z = ad.clip(y, -0.8, 0.8)
            return ad.reduce_sum(ad.mul(z, ad.log(ad.add(ad.exp(y), ad.constant(1.0)))))

        graph = Graph(build)
        assert finite_diff_check(graph, inputs, params).max_rel_error < 1e-4


class TestErrors:
    def test_shape_mismatch_names_node(self):
        with pytest.raises(ShapeError) as exc:
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
        assert exc.value.node == "matmul"

    def test_non_finite_names_node(self):
        with pytest.raises(NonFiniteError) as exc:
            ad.log(ad.constant([0.0]))
        assert exc.value.node == "log"

    def test_unchecked_disables_finite_checks(self):
        with ad.unchecked():
            out = ad.log(ad.constant([0.0]))
        assert np.isneginf(out.data[0])

    def test_no_grad_builds_no_tape(self):
        p = ad.parameter(np.ones(2))
        with ad.no_grad():
            out = ad.reduce_sum(ad.mul(p, p))
        assert not out.requires_grad


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(-50, 50), min_size=4, max_size=4),
        min_size=1,
        max_size=8,
    )
)
def test_softmax_rows_positive_and_normalized(rows):
    out = ad.softmax(ad.constant(np.array(rows))).data
    assert (out > 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
