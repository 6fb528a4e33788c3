"""Named differentiable computations and the finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad

__all__ = ["Graph", "GradCheckResult", "finite_diff_check"]


class Graph:
    """A named computation from (inputs, params) to named output tensors.

    ``build`` receives dictionaries of :class:`~dualipw.numkit.autodiff.Tensor`
    and returns either a single Tensor (named ``loss``) or a dict of named
    Tensors. Inputs are constants; params are gradient leaves unless listed
    in ``detached``.
    """

    def __init__(self, build: Callable, name: str = "graph", static_inputs=None):
        self.build = build
        self.name = name
        self.static_inputs = static_inputs or {}

    def _run(self, inputs, params, detached=frozenset()):
        t_inputs = {k: ad.constant(v) for k, v in inputs.items()}
        t_params = {
            k: (ad.constant(v) if k in detached else ad.parameter(v))
            for k, v in params.items()
        }
        out = self.build(t_inputs, t_params)
        if isinstance(out, ad.Tensor):
            out = {"loss": out}
        return out, t_params

    def forward(self, inputs: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray]):
        """Evaluate and return every named output as a numpy array."""
        out, _ = self._run(inputs, params)
        return {k: v.data for k, v in out.items()}

    def backward(
        self,
        inputs: Mapping[str, np.ndarray],
        params: Mapping[str, np.ndarray],
        output: str = "loss",
        detached=frozenset(),
    ):
        """Return (loss value, gradient per parameter).

        Parameters named in ``detached`` are treated as stop-gradient
        leaves and come back with exactly zero gradients.
        """
        outputs, grads = self.evaluate(inputs, params, output=output, detached=detached)
        return float(outputs[output]), grads

    def evaluate(
        self,
        inputs: Mapping[str, np.ndarray],
        params: Mapping[str, np.ndarray],
        output: str = "loss",
        detached=frozenset(),
    ):
        """One pass: every named output plus gradients of ``output``."""
        out, t_params = self._run(inputs, params, detached=frozenset(detached))
        ad.backward(out[output])
        grads = {}
        for k, t in t_params.items():
            if t.grad is None:
                grads[k] = np.zeros_like(t.data)
            else:
                grads[k] = t.grad
        return {k: v.data for k, v in out.items()}, grads


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    n_params: int

    def __str__(self) -> str:
        return (
            f"max rel error {self.max_rel_error:.3e} "
            f"(worst: {self.worst_param}, {self.n_params} params)"
        )


def finite_diff_check(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    params: Mapping[str, np.ndarray],
    output: str = "loss",
    eps: float = 1e-5,
    detached=frozenset(),
) -> GradCheckResult:
    """Compare backward gradients against central finite differences.

    Perturbs every entry of every non-detached parameter, so the graph
    must be small (fewer than ~1e4 parameters). The reported error is
    relative for gradients larger than 1e-5 in magnitude and absolute
    below that, where float64 differencing noise dominates any true
    relative error.
    """
    n_params = sum(v.size for k, v in params.items() if k not in detached)
    if n_params >= 10_000:
        raise ValueError(f"graph too large for exhaustive check ({n_params} params)")

    _, grads = graph.backward(inputs, params, output=output, detached=detached)

    worst = 0.0
    worst_name = ""
    with ad.no_grad(), ad.unchecked():
        for name, arr in params.items():
            if name in detached:
                continue
            flat = arr.flat
            gflat = grads[name].reshape(-1)
            for i in range(arr.size):
                saved = flat[i]
                flat[i] = saved + eps
                hi = graph.forward(inputs, params)[output]
                flat[i] = saved - eps
                lo = graph.forward(inputs, params)[output]
                flat[i] = saved
                fd = (float(hi) - float(lo)) / (2.0 * eps)
                rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-5)
                if rel > worst:
                    worst = rel
                    worst_name = f"{name}[{i}]"
    return GradCheckResult(max_rel_error=worst, worst_param=worst_name, n_params=n_params)
