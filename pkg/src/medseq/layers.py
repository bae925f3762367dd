"""Neural building blocks: LSTM cell with masked sequence runner, inverted
dropout, dense output heads, and concatenation merge.

All sequence inputs are left-padded: padded positions precede real ones, so the
final time step is always real. Masked positions carry hidden and cell state
through unchanged, which makes padded and unpadded runs bit-compatible.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import (
    Parameter,
    ShapeError,
    affine,
    affine_backward,
    sigmoid,
    softmax,
    uniform_init,
)

# gate slices within the fused 4H axis
_I, _F, _O, _G = 0, 1, 2, 3


class LstmCell:
    """Standard LSTM gating unit with fused gate matrices.

    ``wx`` is (input_size, 4H), ``wh`` is (H, 4H), ``b`` is (4H,), gate order
    i, f, o, g. Per-gate views (w_i, u_i, b_i, ...) expose the classic layout.
    The forget-gate bias starts at 1 so fresh cells retain memory.
    """

    def __init__(self, name: str, input_size: int, hidden_size: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        fan_in = input_size + hidden_size
        self.wx = Parameter(f"{name}.wx", uniform_init(rng, (input_size, 4 * h), fan_in, dtype))
        self.wh = Parameter(f"{name}.wh", uniform_init(rng, (h, 4 * h), fan_in, dtype))
        bias = np.zeros(4 * h, dtype=dtype)
        bias[_F * h:(_F + 1) * h] = 1.0
        self.b = Parameter(f"{name}.b", bias)

    def params(self) -> list[Parameter]:
        return [self.wx, self.wh, self.b]

    def _gate_view(self, arr: np.ndarray, gate: int) -> np.ndarray:
        h = self.hidden_size
        return arr[..., gate * h:(gate + 1) * h]

    @property
    def w_i(self) -> np.ndarray:
        return self._gate_view(self.wx.value, _I)

    @property
    def w_f(self) -> np.ndarray:
        return self._gate_view(self.wx.value, _F)

    @property
    def w_o(self) -> np.ndarray:
        return self._gate_view(self.wx.value, _O)

    @property
    def w_g(self) -> np.ndarray:
        return self._gate_view(self.wx.value, _G)

    @property
    def u_i(self) -> np.ndarray:
        return self._gate_view(self.wh.value, _I)

    @property
    def u_f(self) -> np.ndarray:
        return self._gate_view(self.wh.value, _F)

    @property
    def u_o(self) -> np.ndarray:
        return self._gate_view(self.wh.value, _O)

    @property
    def u_g(self) -> np.ndarray:
        return self._gate_view(self.wh.value, _G)

    @property
    def b_i(self) -> np.ndarray:
        return self._gate_view(self.b.value, _I)

    @property
    def b_f(self) -> np.ndarray:
        return self._gate_view(self.b.value, _F)

    @property
    def b_o(self) -> np.ndarray:
        return self._gate_view(self.b.value, _O)

    @property
    def b_g(self) -> np.ndarray:
        return self._gate_view(self.b.value, _G)


@dataclass
class LstmRun:
    """Forward pass over a masked sequence; keeps per-step tensors for BPTT.

    The input projection x @ wx + b is computed for every step in one matmul;
    only the recurrent projection runs step by step.
    """

    h_final: np.ndarray
    c_final: np.ndarray
    states: list[tuple[np.ndarray, np.ndarray]]
    inputs: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    gates: Optional[np.ndarray] = None      # (T, B, 4H): i, f, o, g activations
    c_cand: Optional[np.ndarray] = None     # (T, B, H)
    tanh_c: Optional[np.ndarray] = None     # (T, B, H)
    h_prev: Optional[np.ndarray] = None     # (T, B, H)
    c_prev: Optional[np.ndarray] = None     # (T, B, H)


def lstm_step(cell: LstmCell, h_prev: np.ndarray, c_prev: np.ndarray,
              x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One unmasked LSTM step on (B, D) inputs (or 1-D vectors)."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
        h_prev = h_prev[None, :]
        c_prev = c_prev[None, :]
    if x.shape[1] != cell.input_size:
        raise ShapeError(f"lstm_step: input width {x.shape} vs cell {cell.input_size}")
    if h_prev.shape[1] != cell.hidden_size or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm_step: state shapes {h_prev.shape}/{c_prev.shape} "
                         f"vs hidden {cell.hidden_size}")
    hsz = cell.hidden_size
    z = x @ cell.wx.value + h_prev @ cell.wh.value + cell.b.value
    i = sigmoid(z[:, :hsz])
    f = sigmoid(z[:, hsz:2 * hsz])
    o = sigmoid(z[:, 2 * hsz:3 * hsz])
    g = np.tanh(z[:, 3 * hsz:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    if squeeze:
        return h[0], c[0]
    return h, c


def run_masked_sequence(cell: LstmCell, inputs: np.ndarray,
                        mask: Optional[np.ndarray] = None) -> LstmRun:
    """Run the cell over a (T, B, D) batch with a (T, B) 0/1 mask.

    Masked positions copy state through unchanged, so left-padded sequences give
    the same final state as their unpadded equivalents. States start at zero.
    """
    if inputs.ndim != 3:
        raise ShapeError(f"run_masked_sequence expects (T, B, D), got {inputs.shape}")
    t_len, batch, width = inputs.shape
    if width != cell.input_size:
        raise ShapeError(f"sequence width {width} vs cell input {cell.input_size}")
    if mask is None:
        mask = np.ones((t_len, batch), dtype=inputs.dtype)
    if mask.shape != (t_len, batch):
        raise ShapeError(f"mask shape {mask.shape} vs inputs {inputs.shape}")
    hsz = cell.hidden_size
    xw = (inputs.reshape(t_len * batch, width) @ cell.wx.value
          + cell.b.value).reshape(t_len, batch, 4 * hsz)
    run = LstmRun(np.zeros((batch, hsz), dtype=inputs.dtype),
                  np.zeros((batch, hsz), dtype=inputs.dtype), [],
                  inputs=inputs, mask=mask,
                  gates=np.empty((t_len, batch, 4 * hsz), dtype=inputs.dtype),
                  c_cand=np.empty((t_len, batch, hsz), dtype=inputs.dtype),
                  tanh_c=np.empty((t_len, batch, hsz), dtype=inputs.dtype),
                  h_prev=np.empty((t_len, batch, hsz), dtype=inputs.dtype),
                  c_prev=np.empty((t_len, batch, hsz), dtype=inputs.dtype))
    h = run.h_final
    c = run.c_final
    for t in range(t_len):
        run.h_prev[t] = h
        run.c_prev[t] = c
        z = xw[t] + h @ cell.wh.value
        gates = run.gates[t]
        gates[:, :3 * hsz] = sigmoid(z[:, :3 * hsz])  # i, f, o share the slab
        gates[:, 3 * hsz:] = np.tanh(z[:, 3 * hsz:])
        i = gates[:, :hsz]
        f = gates[:, hsz:2 * hsz]
        o = gates[:, 2 * hsz:3 * hsz]
        g = gates[:, 3 * hsz:]
        c_cand = f * c + i * g
        tanh_c = np.tanh(c_cand)
        run.c_cand[t] = c_cand
        run.tanh_c[t] = tanh_c
        mcol = mask[t][:, None]
        h = mcol * (o * tanh_c) + (1.0 - mcol) * h
        c = mcol * c_cand + (1.0 - mcol) * c
        run.states.append((h, c))
    run.h_final = h
    run.c_final = c
    return run


def lstm_backward_from_final(cell: LstmCell, run: LstmRun,
                             dh_final: np.ndarray) -> np.ndarray:
    """BPTT seeding the gradient at the final hidden state only.

    Accumulates into the cell's parameter grads and returns d(inputs) with the
    sequence's (T, B, D) shape. Weight gradients are formed with one matmul
    over all time steps.
    """
    if run.gates is None:
        raise ValueError("run carries no caches")
    t_len, batch, _ = run.inputs.shape
    hsz = cell.hidden_size
    dz_all = np.empty((t_len, batch, 4 * hsz), dtype=run.inputs.dtype)
    dh = dh_final.astype(run.inputs.dtype, copy=True)
    dc = np.zeros_like(run.c_final)
    wh_t = cell.wh.value.T
    for t in range(t_len - 1, -1, -1):
        gates = run.gates[t]
        i = gates[:, :hsz]
        f = gates[:, hsz:2 * hsz]
        o = gates[:, 2 * hsz:3 * hsz]
        g = gates[:, 3 * hsz:]
        tanh_c = run.tanh_c[t]
        m = run.mask[t][:, None]
        dh_cand = m * dh
        dc_cand = m * dc + dh_cand * o * (1.0 - tanh_c ** 2)
        dz = dz_all[t]
        dz[:, :hsz] = dc_cand * g * i * (1.0 - i)
        dz[:, hsz:2 * hsz] = dc_cand * run.c_prev[t] * f * (1.0 - f)
        dz[:, 2 * hsz:3 * hsz] = dh_cand * tanh_c * o * (1.0 - o)
        dz[:, 3 * hsz:] = dc_cand * i * (1.0 - g ** 2)
        dh = dz @ wh_t + (1.0 - m) * dh
        dc = dc_cand * f + (1.0 - m) * dc
    flat_dz = dz_all.reshape(t_len * batch, 4 * hsz)
    flat_x = run.inputs.reshape(t_len * batch, -1)
    flat_h_prev = run.h_prev.reshape(t_len * batch, hsz)
    cell.wx.grad += flat_x.T @ flat_dz
    cell.wh.grad += flat_h_prev.T @ flat_dz
    cell.b.grad += flat_dz.sum(axis=0)
    return (flat_dz @ cell.wx.value.T).reshape(run.inputs.shape)


def dropout(x: np.ndarray, rate: float, train: bool,
            rng: Optional[np.random.Generator] = None
            ) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Inverted dropout. Inference mode is the exact identity.

    Training zeroes each entry with probability ``rate`` and scales survivors by
    1/(1-rate); the returned mask already includes the scale.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dy: np.ndarray, keep: Optional[np.ndarray]) -> np.ndarray:
    return dy if keep is None else dy * keep


class DenseHead:
    """Affine map from a hidden vector to class logits."""

    def __init__(self, name: str, input_size: int, n_out: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.input_size = input_size
        self.n_out = n_out
        self.w = Parameter(f"{name}.w", uniform_init(rng, (input_size, n_out),
                                                     input_size, dtype))
        self.b = Parameter(f"{name}.b", np.zeros(n_out, dtype=dtype))

    def params(self) -> list[Parameter]:
        return [self.w, self.b]

    def forward(self, h: np.ndarray) -> np.ndarray:
        return affine(h, self.w.value, self.b.value)

    def backward(self, dlogits: np.ndarray, h: np.ndarray) -> np.ndarray:
        dh, dw, db = affine_backward(dlogits, h, self.w.value)
        self.w.grad += dw
        self.b.grad += db
        return dh


def head_dcc(logits: np.ndarray) -> np.ndarray:
    """Probability distribution over combination classes (row-wise softmax)."""
    return softmax(logits)


def head_dc(logits: np.ndarray) -> np.ndarray:
    """7 independent per-class probabilities (elementwise sigmoid)."""
    return sigmoid(logits)


def merge_concat(h_list: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate branch outputs along the feature axis, in declared order."""
    if not h_list:
        raise ValueError("merge_concat needs at least one input")
    return np.concatenate(list(h_list), axis=-1)


def merge_concat_backward(dout: np.ndarray,
                          widths: Sequence[int]) -> list[np.ndarray]:
    if sum(widths) != dout.shape[-1]:
        raise ShapeError(f"merge widths {widths} vs grad {dout.shape}")
    parts = []
    offset = 0
    for w in widths:
        parts.append(dout[..., offset:offset + w])
        offset += w
    return parts
