"""Hand-rolled LSTM: a fused cell step with an analytic backward pass.

Gate layout in the packed weight matrices is (input, forget, candidate,
output). Initial hidden and cell states are zero vectors. The cell is a
single tape node per step, which keeps finite-difference sweeps over
whole sequences affordable.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["lstm_cell", "lstm_forward", "lstm_param_shapes"]


def lstm_param_shapes(input_size: int, hidden_size: int, layers: int, prefix: str = "lstm"):
    """Parameter names and shapes for a stacked LSTM."""
    shapes = {}
    for layer in range(layers):
        in_size = input_size if layer == 0 else hidden_size
        shapes[f"{prefix}{layer}.wx"] = (in_size, 4 * hidden_size)
        shapes[f"{prefix}{layer}.wh"] = (hidden_size, 4 * hidden_size)
        shapes[f"{prefix}{layer}.b"] = (4 * hidden_size,)
    return shapes


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor):
    """One LSTM step: returns (new hidden, new cell), each (batch, hidden).

    Sigmoid input/forget/output gates, tanh candidate and output squash.
    """
    hidden = wh.data.shape[0]
    if wx.data.shape[1] != 4 * hidden or b.data.shape != (4 * hidden,):
        raise ad.ShapeError("lstm_cell", f"packed gate shapes inconsistent for hidden size {hidden}")
    if x.data.shape[1] != wx.data.shape[0] or h.data.shape[1] != hidden:
        raise ad.ShapeError(
            "lstm_cell", f"input {x.data.shape} / state {h.data.shape} do not match weights"
        )

    z = x.data @ wx.data + h.data @ wh.data + b.data
    gi = ad._sigmoid(z[:, :hidden])
    gf = ad._sigmoid(z[:, hidden : 2 * hidden])
    gc = np.tanh(z[:, 2 * hidden : 3 * hidden])
    go = ad._sigmoid(z[:, 3 * hidden :])
    c_new = gf * c.data + gi * gc
    tc = np.tanh(c_new)
    h_new = go * tc
    packed = np.concatenate([h_new, c_new], axis=1)

    x_data, h_data, c_data = x.data, h.data, c.data

    def vjp(g):
        dh = g[:, :hidden]
        dc = g[:, hidden:] + dh * go * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[:, :hidden] = dc * gc * gi * (1.0 - gi)
        dz[:, hidden : 2 * hidden] = dc * c_data * gf * (1.0 - gf)
        dz[:, 2 * hidden : 3 * hidden] = dc * gi * (1.0 - gc * gc)
        dz[:, 3 * hidden :] = dh * tc * go * (1.0 - go)
        return (
            dz @ wx.data.T,
            dz @ wh.data.T,
            dc * gf,
            x_data.T @ dz,
            h_data.T @ dz,
            dz.sum(axis=0),
        )

    node = ad._node(packed, (x, h, c, wx, wh, b), vjp, "lstm_cell")
    return ad.narrow(node, 1, 0, hidden), ad.narrow(node, 1, hidden, hidden)


def lstm_forward(
    sequence: list[Tensor],
    params: dict[str, Tensor],
    hidden_size: int,
    layers: int = 1,
    prefix: str = "lstm",
) -> list[Tensor]:
    """Run a stacked LSTM over a sequence of (batch, input) tensors.

    Returns the top-layer hidden state at every step; the last entry is
    what downstream heads consume.
    """
    if not sequence:
        raise ValueError("lstm_forward: empty sequence")
    batch = sequence[0].data.shape[0]
    layer_inputs = sequence
    for layer in range(layers):
        wx = params[f"{prefix}{layer}.wx"]
        wh = params[f"{prefix}{layer}.wh"]
        b = params[f"{prefix}{layer}.b"]
        h = ad.constant(np.zeros((batch, hidden_size)))
        c = ad.constant(np.zeros((batch, hidden_size)))
        outputs = []
        for x in layer_inputs:
            h, c = lstm_cell(x, h, c, wx, wh, b)
            outputs.append(h)
        layer_inputs = outputs
    return layer_inputs
