"""Minimal n-dimensional tensors with reverse-mode autodiff.

Forward ops cover exactly what the controller needs: 2D convolution,
group normalization, channel dropout, elementwise nonlinearities,
pooling, dense layers and a few reductions. Gradients are recorded on
an explicit tape; replaying the tape in reverse fills the ``grad``
buffers of every tensor that requires one. A central finite-difference
oracle is included for verification.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


class ConfigError(ValueError):
    """An operation was configured with invalid hyperparameters."""


class Tensor:
    """A dense real array plus an optional same-shape gradient buffer.

    Data is immutable by convention once produced by an op; only ``grad``
    mutates (additively, during backward passes).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values; no tape history, no grad flow."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of executed ops for one backward replay.

    While active (as a context manager), every op touching a tensor with
    ``requires_grad`` appends a backward closure. ``backward(loss)`` replays
    the closures in reverse execution order exactly once, accumulating
    gradients additively into every contributing tensor.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self._records.append((out, backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor):
        """Fill grad buffers with d(loss)/d(tensor) for everything on this tape."""
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for out, _ in self._records}
        if self._records and id(loss) not in produced:
            raise ValueError("loss was not produced by an op recorded on this tape")
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, fn in reversed(self._records):
            if out.grad is None:
                continue  # branch not on any path to the loss
            fn(out.grad)
            # free intermediate grads; leaves (params, inputs) keep theirs
            out.grad = None if out is not loss else out.grad


def backward(loss: Tensor, tape: GradTape):
    tape.backward(loss)


def active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _register(out: Tensor, inputs: Sequence[Tensor], backward_fn):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution

def _as_batched(x: np.ndarray):
    """View (C,H,W) as (1,C,H,W); return array and whether a batch axis was added."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C,H,W) or (B,C,H,W) array, got ndim={x.ndim}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution (cross-correlation) with zero padding.

    x: (C_in,H,W) or (B,C_in,H,W); kernel: (C_out,C_in,kh,kw); bias: (C_out,).
    Output spatial size is floor((H + 2*padding - kh)/stride) + 1.
    """
    xb, squeezed = _as_batched(x.data)
    B, C, H, W = xb.shape
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4D (C_out,C_in,kh,kw), got {kernel.shape}")
    CO, CI, kh, kw = kernel.shape
    if CI != C:
        raise ShapeError(f"conv2d input channels {C} != kernel in-channels {CI}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {H + 2*padding}x{W + 2*padding}"
        )
    if bias is not None and bias.shape != (CO,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({CO},)")

    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xb
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B,C,Ho,Wo,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kmat = kernel.data.reshape(CO, C * kh * kw)
    out_mat = cols @ kmat.T
    if bias is not None:
        out_mat += bias.data
    out_data = out_mat.reshape(B, Ho, Wo, CO).transpose(0, 3, 1, 2)
    if squeezed:
        out_data = out_data[0]
    out = Tensor(np.ascontiguousarray(out_data))

    inputs = [x, kernel] + ([bias] if bias is not None else [])

    def backward_fn(g: np.ndarray):
        gb = g[None] if squeezed else g
        g_mat = gb.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, CO)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g_mat.sum(axis=0))
        if kernel.requires_grad:
            kernel.accumulate_grad((g_mat.T @ cols).reshape(kernel.shape))
        if x.requires_grad:
            cols_g = (g_mat @ kmat).reshape(B, Ho, Wo, C, kh, kw)
            cols_g = cols_g.transpose(0, 3, 4, 5, 1, 2)  # (B,C,kh,kw,Ho,Wo)
            gx = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols_g[:, :, i, j]
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            x.accumulate_grad(gx[0] if squeezed else gx)

    return _register(out, inputs, backward_fn)


# ---------------------------------------------------------------------------
# group normalization

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize over groups of channels and all spatial positions of one sample.

    Statistics are per sample and per group; gamma/beta are per channel.
    The backward pass treats mean and variance as functions of the input.
    """
    xb, squeezed = _as_batched(x.data)
    B, C, H, W = xb.shape
    if C % groups != 0:
        raise ConfigError(f"group_norm: {C} channels not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm affine shapes {gamma.shape}/{beta.shape} != ({C},)")

    n = (C // groups) * H * W
    xg = xb.reshape(B, groups, n)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(B, C, H, W)
    out_data = xhat * gamma.data[:, None, None] + beta.data[:, None, None]
    if squeezed:
        out_data = out_data[0]
    out = Tensor(out_data)

    def backward_fn(g: np.ndarray):
        gb = g[None] if squeezed else g
        if beta.requires_grad:
            beta.accumulate_grad(gb.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((gb * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = (gb * gamma.data[:, None, None]).reshape(B, groups, n)
            xh = xhat.reshape(B, groups, n)
            m1 = gh.mean(axis=2, keepdims=True)
            m2 = (gh * xh).mean(axis=2, keepdims=True)
            gx = (inv * (gh - m1 - xh * m2)).reshape(B, C, H, W)
            x.accumulate_grad(gx[0] if squeezed else gx)

    return _register(out, [x, gamma, beta], backward_fn)


# ---------------------------------------------------------------------------
# dropout

def channel_dropout(x: Tensor, rate: float, mask: np.ndarray) -> Tensor:
    """Zero whole channels given a binary keep-mask; survivors scale by 1/(1-rate).

    mask has shape (C,) or (B,C) and is plain data, not a differentiable input;
    the op is deterministic given the mask (inverted-dropout convention).
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"channel_dropout rate must be in [0,1), got {rate}")
    xb, squeezed = _as_batched(x.data)
    B, C = xb.shape[:2]
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape == (C,):
        m = np.broadcast_to(m, (B, C))
    elif m.shape != (B, C):
        raise ShapeError(f"dropout mask shape {m.shape} incompatible with {C} channels")
    scale = m[:, :, None, None] / (1.0 - rate)
    out_data = xb * scale
    if squeezed:
        out_data = out_data[0]
    out = Tensor(out_data)

    def backward_fn(g: np.ndarray):
        if x.requires_grad:
            gb = g[None] if squeezed else g
            gx = gb * scale
            x.accumulate_grad(gx[0] if squeezed else gx)

    return _register(out, [x], backward_fn)


# ---------------------------------------------------------------------------
# pointwise ops

def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(out_data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * out_data * (1.0 - out_data))

    return _register(out, [x], backward_fn)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)
    out = Tensor(out_data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - out_data * out_data))

    return _register(out, [x], backward_fn)


def _check_same_shape(op: str, x: Tensor, y: Tensor):
    if x.shape != y.shape:
        raise ShapeError(f"{op}: operand shapes {x.shape} and {y.shape} differ")


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("add", x, y)
    out = Tensor(x.data + y.data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if y.requires_grad:
            y.accumulate_grad(g)

    return _register(out, [x, y], backward_fn)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("sub", x, y)
    out = Tensor(x.data - y.data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if y.requires_grad:
            y.accumulate_grad(-g)

    return _register(out, [x, y], backward_fn)


def hadamard(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("hadamard", x, y)
    out = Tensor(x.data * y.data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * y.data)
        if y.requires_grad:
            y.accumulate_grad(g * x.data)

    return _register(out, [x, y], backward_fn)


def pointwise(x: Tensor, kind: str, y: Optional[Tensor] = None) -> Tensor:
    """Dispatch wrapper: kind in {sigmoid, tanh, add, hadamard}."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if y is None:
        raise ConfigError(f"pointwise kind {kind!r} needs a second operand")
    if kind == "add":
        return add(x, y)
    if kind == "hadamard":
        return hadamard(x, y)
    raise ConfigError(f"unknown pointwise kind {kind!r}")


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * s)

    return _register(out, [x], backward_fn)


# ---------------------------------------------------------------------------
# pooling / dense / reductions

def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (C,H,W) -> (C,) or (B,C,H,W) -> (B,C)."""
    xb, squeezed = _as_batched(x.data)
    B, C, H, W = xb.shape
    out_data = xb.mean(axis=(2, 3))
    if squeezed:
        out_data = out_data[0]
    out = Tensor(out_data)

    def backward_fn(g):
        if x.requires_grad:
            gb = g[None] if squeezed else g
            gx = np.broadcast_to(gb[:, :, None, None] / (H * W), xb.shape)
            x.accumulate_grad(gx[0] if squeezed else gx)

    return _register(out, [x], backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N,) -> (M,), or row-wise (B,N) -> (B,M)."""
    M, N = weight.shape
    single = x.ndim == 1
    xb = x.data[None] if single else x.data
    if xb.ndim != 2 or xb.shape[1] != N:
        raise ShapeError(f"dense: input shape {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (M,):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({M},)")
    out_data = xb @ weight.data.T + bias.data
    out = Tensor(out_data[0] if single else out_data)

    def backward_fn(g):
        gb = g[None] if single else g
        if bias.requires_grad:
            bias.accumulate_grad(gb.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad(gb.T @ xb)
        if x.requires_grad:
            gx = gb @ weight.data
            x.accumulate_grad(gx[0] if single else gx)

    return _register(out, [x, weight, bias], backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()))

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype))

    return _register(out, [x], backward_fn)


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean()))

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g.reshape(()) / x.size, x.shape).astype(x.dtype))

    return _register(out, [x], backward_fn)


def rows_l2norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row: (B,D) -> (B,). Subgradient 0 at the origin."""
    if x.ndim != 2:
        raise ShapeError(f"rows_l2norm expects (B,D), got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    out = Tensor(norms)

    def backward_fn(g):
        if x.requires_grad:
            safe = np.where(norms > 0, norms, 1.0)
            x.accumulate_grad((g / safe)[:, None] * x.data)

    return _register(out, [x], backward_fn)


# ---------------------------------------------------------------------------
# structural ops (concatenation, slicing, batch-row routing)

def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    datas = [p.data for p in parts]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis if axis >= 0 else g.ndim + axis] = slice(a, b)
                p.accumulate_grad(g[tuple(idx)])

    return _register(out, list(parts), backward_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis if axis >= 0 else x.ndim + axis
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    out = Tensor(np.ascontiguousarray(x.data[tuple(idx)]))

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[tuple(idx)] = g
            x.accumulate_grad(gx)

    return _register(out, [x], backward_fn)


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select batch rows (axis 0) by integer index."""
    rows = np.asarray(rows, dtype=np.intp)
    out = Tensor(x.data[rows])

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, rows, g)
            x.accumulate_grad(gx)

    return _register(out, [x], backward_fn)


def merge_rows(base: Tensor, new: Tensor, rows: np.ndarray) -> Tensor:
    """Copy of base with batch rows ``rows`` replaced by the rows of ``new``."""
    rows = np.asarray(rows, dtype=np.intp)
    if new.shape[0] != len(rows):
        raise ShapeError(f"merge_rows: {new.shape[0]} new rows vs {len(rows)} indices")
    out_data = base.data.copy()
    out_data[rows] = new.data
    out = Tensor(out_data)

    def backward_fn(g):
        if new.requires_grad:
            new.accumulate_grad(g[rows])
        if base.requires_grad:
            gb = g.copy()
            gb[rows] = 0.0
            base.accumulate_grad(gb)

    return _register(out, [base, new], backward_fn)


# ---------------------------------------------------------------------------
# verification oracle

def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued f at x, one element at a time.

    f must be deterministic (fix any dropout masks before calling).
    """
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a-n| / max(|a|,|n|,floor); the usual gradient-check metric."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
