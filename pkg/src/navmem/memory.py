"""Convolutional memory cell and the mode-indexed multimodal memory layer.

The cell is a peephole ConvLSTM variant: every gate pre-activation is a sum
of convolutions normalized by GroupNorm before its nonlinearity, channel
dropout is applied to the input, the previous hidden state and the cell
update, and peephole terms are 1x1 convolutions. The output gate reads the
freshly updated cell memory.

A multimodal layer keeps one independent cell (parameters and state) per
behavior mode; each step activates exactly one of them and leaves the other
modes' states untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Mode(IntEnum):
    GO_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    TAKE_ELEVATOR = 3


MODES = tuple(Mode)


class GateNumericsError(FloatingPointError):
    """A gate produced a non-finite value; the message names the gate."""


def group_count(channels: int, cap: int = 32) -> int:
    """Largest divisor of ``channels`` that is at most min(cap, channels)."""
    g = min(cap, channels)
    while channels % g != 0:
        g -= 1
    return g


@dataclass
class MemoryCellParams:
    """All trainable tensors of one cell.

    Spatial kernels (w_x*, w_h*) share one odd kernel size; peepholes
    (w_c*) are 1x1. Per-gate GroupNorm affine parameters live here too.
    """

    w_xi: Tensor; w_hi: Tensor; w_ci: Tensor; b_i: Tensor
    w_xf: Tensor; w_hf: Tensor; w_cf: Tensor; b_f: Tensor
    w_xc: Tensor; w_hc: Tensor; b_c: Tensor
    w_xo: Tensor; w_ho: Tensor; w_co: Tensor; b_o: Tensor
    gn_i_gamma: Tensor; gn_i_beta: Tensor
    gn_f_gamma: Tensor; gn_f_beta: Tensor
    gn_g_gamma: Tensor; gn_g_beta: Tensor
    gn_o_gamma: Tensor; gn_o_beta: Tensor
    groups: int = 1
    eps: float = 1e-5

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in ("w_xi", "w_hi", "w_ci", "b_i", "w_xf", "w_hf", "w_cf", "b_f",
                     "w_xc", "w_hc", "b_c", "w_xo", "w_ho", "w_co", "b_o",
                     "gn_i_gamma", "gn_i_beta", "gn_f_gamma", "gn_f_beta",
                     "gn_g_gamma", "gn_g_beta", "gn_o_gamma", "gn_o_beta"):
            yield prefix + name, getattr(self, name)

    @property
    def channels(self) -> int:
        return self.w_xi.shape[0]


def init_cell_params(channels: int, kernel: int, rng: np.random.Generator,
                     groups_cap: int = 32, dtype=np.float64) -> MemoryCellParams:
    """Random initialization; forget-gate GroupNorm shift starts at +1."""
    c = channels

    def conv_w(k):
        std = (1.0 / (c * k * k)) ** 0.5
        return Tensor(rng.normal(0.0, std, (c, c, k, k)), requires_grad=True, dtype=dtype)

    def vec(v):
        return Tensor(np.full(c, v, dtype=dtype), requires_grad=True, dtype=dtype)

    return MemoryCellParams(
        w_xi=conv_w(kernel), w_hi=conv_w(kernel), w_ci=conv_w(1), b_i=vec(0.0),
        w_xf=conv_w(kernel), w_hf=conv_w(kernel), w_cf=conv_w(1), b_f=vec(0.0),
        w_xc=conv_w(kernel), w_hc=conv_w(kernel), b_c=vec(0.0),
        w_xo=conv_w(kernel), w_ho=conv_w(kernel), w_co=conv_w(1), b_o=vec(0.0),
        gn_i_gamma=vec(1.0), gn_i_beta=vec(0.0),
        gn_f_gamma=vec(1.0), gn_f_beta=vec(1.0),
        gn_g_gamma=vec(1.0), gn_g_beta=vec(0.0),
        gn_o_gamma=vec(1.0), gn_o_beta=vec(0.0),
        groups=group_count(channels, groups_cap),
    )


@dataclass
class MemoryCellState:
    """Cell memory c and hidden output h, same (C,H,W) or (B,C,H,W) shape."""

    c: Tensor
    h: Tensor


def zero_state(channels: int, height: int, width: int, batch: Optional[int] = None,
               dtype=np.float64) -> MemoryCellState:
    shape = (channels, height, width) if batch is None else (batch, channels, height, width)
    return MemoryCellState(c=Tensor(np.zeros(shape, dtype=dtype)),
                           h=Tensor(np.zeros(shape, dtype=dtype)))


@dataclass
class CellMasks:
    """Per-sequence channel keep-masks for the x, h and g dropout paths."""

    x_keep: np.ndarray
    h_keep: np.ndarray
    g_keep: np.ndarray
    rate: float

    def rows(self, idx: np.ndarray) -> "CellMasks":
        if self.x_keep.ndim == 1:
            return self
        return CellMasks(self.x_keep[idx], self.h_keep[idx], self.g_keep[idx], self.rate)


def sample_cell_masks(channels: int, rate: float, rng: np.random.Generator,
                      batch: Optional[int] = None) -> CellMasks:
    shape = (channels,) if batch is None else (batch, channels)

    def draw():
        return (rng.random(shape) >= rate).astype(np.float64)

    return CellMasks(draw(), draw(), draw(), rate)


def _check_finite(name: str, t: Tensor):
    if not np.isfinite(t.data).all():
        raise GateNumericsError(f"non-finite values in gate '{name}'")


def cell_step(x: Tensor, state: MemoryCellState, params: MemoryCellParams,
              masks: Optional[CellMasks] = None, check: bool = True,
              return_gates: bool = False):
    """One recurrent update; returns (h_t, new_state[, gates]).

    Order of operations: drop x and h_{t-1}; input/forget gates from
    GroupNormed conv sums with peepholes on c_{t-1}; candidate g from a
    GroupNormed conv sum, then dropped; c_t = f*c_{t-1} + i*g; output gate
    peeps at the new c_t; h_t = o * tanh(c_t).

    The eight spatial convolutions are evaluated as one fused convolution
    over [x; h] for speed; per-kernel parameters are concatenated on the
    tape so their gradients separate again in backward.
    """
    p = params
    c_ch = p.channels
    kk = p.w_xi.shape[2]
    pad = kk // 2

    if masks is not None and masks.rate > 0.0:
        x = T.channel_dropout(x, masks.rate, masks.x_keep)
        h_prev = T.channel_dropout(state.h, masks.rate, masks.h_keep)
    else:
        h_prev = state.h

    # fused [x;h] convolution producing the i|f|g|o pre-activations
    xh = T.concat([x, h_prev], axis=-3)
    w_gate = T.concat([
        T.concat([p.w_xi, p.w_hi], axis=1),
        T.concat([p.w_xf, p.w_hf], axis=1),
        T.concat([p.w_xc, p.w_hc], axis=1),
        T.concat([p.w_xo, p.w_ho], axis=1),
    ], axis=0)
    b_gate = T.concat([p.b_i, p.b_f, p.b_c, p.b_o], axis=0)
    pre = T.conv2d(xh, w_gate, b_gate, stride=1, padding=pad)

    # i and f share one fused GroupNorm; peepholes read c_{t-1}
    peep_if = T.conv2d(state.c, T.concat([p.w_ci, p.w_cf], axis=0), None)
    pre_if = T.add(T.slice_axis(pre, -3, 0, 2 * c_ch), peep_if)
    gn_if = T.group_norm(pre_if, 2 * p.groups,
                         T.concat([p.gn_i_gamma, p.gn_f_gamma], axis=0),
                         T.concat([p.gn_i_beta, p.gn_f_beta], axis=0), eps=p.eps)
    if_gates = T.sigmoid(gn_if)
    i_t = T.slice_axis(if_gates, -3, 0, c_ch)
    f_t = T.slice_axis(if_gates, -3, c_ch, 2 * c_ch)

    g_t = T.tanh(T.group_norm(T.slice_axis(pre, -3, 2 * c_ch, 3 * c_ch), p.groups,
                              p.gn_g_gamma, p.gn_g_beta, eps=p.eps))
    if masks is not None and masks.rate > 0.0:
        g_t = T.channel_dropout(g_t, masks.rate, masks.g_keep)

    if check:
        _check_finite("i", i_t)
        _check_finite("f", f_t)
        _check_finite("g", g_t)

    c_t = T.add(T.hadamard(f_t, state.c), T.hadamard(i_t, g_t))
    if check:
        _check_finite("c", c_t)

    pre_o = T.add(T.slice_axis(pre, -3, 3 * c_ch, 4 * c_ch), T.conv2d(c_t, p.w_co, None))
    o_t = T.sigmoid(T.group_norm(pre_o, p.groups, p.gn_o_gamma, p.gn_o_beta, eps=p.eps))
    if check:
        _check_finite("o", o_t)

    h_t = T.hadamard(o_t, T.tanh(c_t))
    new_state = MemoryCellState(c=c_t, h=h_t)
    if return_gates:
        return h_t, new_state, {"i": i_t, "f": f_t, "g": g_t, "o": o_t}
    return h_t, new_state


@dataclass
class MultimodalLayerState:
    """One MemoryCellState per mode. Only the stepped mode's entry changes."""

    states: dict[Mode, MemoryCellState]

    def clone_with(self, mode: Mode, new_state: MemoryCellState) -> "MultimodalLayerState":
        states = dict(self.states)
        states[mode] = new_state
        return MultimodalLayerState(states)


@dataclass
class MultimodalLayer:
    """Parameter container for one memory layer.

    With ``multimodal`` set, four independent cells (one per mode) share the
    layer; otherwise a single cell serves every mode.
    """

    params: dict[Mode, MemoryCellParams]
    multimodal: bool = True

    @classmethod
    def create(cls, channels: int, kernel: int, multimodal: bool,
               rng: np.random.Generator, groups_cap: int = 32,
               dtype=np.float64) -> "MultimodalLayer":
        if multimodal:
            params = {m: init_cell_params(channels, kernel, rng, groups_cap, dtype)
                      for m in MODES}
        else:
            shared = init_cell_params(channels, kernel, rng, groups_cap, dtype)
            params = {m: shared for m in MODES}
        return cls(params=params, multimodal=multimodal)

    @property
    def channels(self) -> int:
        return self.params[Mode.GO_FORWARD].channels

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.multimodal:
            for m in MODES:
                yield from self.params[m].named(f"{prefix}mode{int(m)}.")
        else:
            yield from self.params[Mode.GO_FORWARD].named(f"{prefix}shared.")

    def params_for(self, mode: Mode) -> MemoryCellParams:
        try:
            return self.params[Mode(mode)]
        except (ValueError, KeyError):
            raise ValueError(f"unknown mode {mode!r}") from None

    def _slot(self, mode) -> Mode:
        """State slot for a mode: shared layers keep one memory for all modes."""
        return Mode(mode) if self.multimodal else Mode.GO_FORWARD

    def zero_layer_state(self, height: int, width: int, batch: Optional[int] = None,
                         dtype=np.float64) -> MultimodalLayerState:
        modes = MODES if self.multimodal else (Mode.GO_FORWARD,)
        return MultimodalLayerState(
            {m: zero_state(self.channels, height, width, batch, dtype) for m in modes})

    def step(self, x: Tensor, mode: Mode, layer_state: MultimodalLayerState,
             masks: Optional[CellMasks] = None):
        """Single-mode step: activates one cell, other mode states pass through
        untouched (bit-identical objects)."""
        p = self.params_for(mode)
        slot = self._slot(mode)
        h, new_cell = cell_step(x, layer_state.states[slot], p, masks)
        return h, layer_state.clone_with(slot, new_cell)

    def step_batched(self, x: Tensor, modes: np.ndarray,
                     layer_state: MultimodalLayerState,
                     masks: Optional[CellMasks] = None):
        """Batched step where each row may use a different mode.

        Rows are gathered per distinct mode, run through that mode's cell
        and merged back; modes absent from the batch keep their state
        objects unchanged.
        """
        modes = np.asarray(modes, dtype=np.int64)
        if not self.multimodal:
            p = self.params[Mode.GO_FORWARD]
            slot = Mode.GO_FORWARD
            h, new_cell = cell_step(x, layer_state.states[slot], p, masks)
            return h, layer_state.clone_with(slot, new_cell)
        present = np.unique(modes)
        if len(present) == 1:
            mode = Mode(int(present[0]))
            p = self.params_for(mode)
            h, new_cell = cell_step(x, layer_state.states[mode], p, masks)
            return h, layer_state.clone_with(mode, new_cell)

        states = dict(layer_state.states)
        h_out = Tensor(np.zeros_like(x.data))
        for mval in present:
            mode = Mode(int(mval))
            rows = np.nonzero(modes == mval)[0]
            p = self.params_for(mode)
            sub_state = MemoryCellState(
                c=T.gather_rows(states[mode].c, rows),
                h=T.gather_rows(states[mode].h, rows),
            )
            sub_masks = masks.rows(rows) if masks is not None else None
            h_rows, new_sub = cell_step(T.gather_rows(x, rows), sub_state, p, sub_masks)
            states[mode] = MemoryCellState(
                c=T.merge_rows(states[mode].c, new_sub.c, rows),
                h=T.merge_rows(states[mode].h, new_sub.h, rows),
            )
            h_out = T.merge_rows(h_out, h_rows, rows)
        return h_out, MultimodalLayerState(states)


def layer_step(x: Tensor, mode: Mode, layer: MultimodalLayer,
               layer_state: MultimodalLayerState,
               masks: Optional[CellMasks] = None):
    """Functional wrapper over MultimodalLayer.step."""
    return layer.step(x, mode, layer_state, masks)
