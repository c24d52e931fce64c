"""Float64 tensors with tape-based reverse-mode differentiation.

Only the operations the attention blocks and the toy backbone need are
provided. There is no broadcasting: elementwise ops require equal shapes and
biases are handled inside the layer ops that own them.

Usage::

    w = Tensor(np.eye(2), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(matmul(w, x))
    grads = backward(tape, loss)
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "no_tape",
    "backward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "scale",
    "sum_all",
    "mean",
    "reshape",
    "transpose",
    "matmul",
    "softmax_rows",
    "relu",
    "conv_pointwise",
    "conv_temporal",
    "conv2d",
    "avgpool2d",
    "channel_affine",
    "linear",
    "cross_entropy",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Backward was asked for something the tape cannot provide."""


_next_id = itertools.count()
_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """N-d float64 array with an optional gradient slot.

    ``data`` is a C-contiguous numpy array; ``shape`` is its shape. Only
    ``grad`` is meant to change after construction.
    """

    __slots__ = ("id", "data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.id = next(_next_id)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.id = next(_next_id)
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output_id: int
    output_shape: tuple[int, ...]
    # maps the output gradient to one gradient (or None) per input
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Nodes are appended in execution order, which is a topological order of
    the computation graph. Tapes nest; ops record onto the innermost one.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


@contextlib.contextmanager
def no_tape():
    """Suspend recording, e.g. for finite-difference probes."""
    if not hasattr(_local, "stack"):
        _local.stack = []
    _local.stack.append(None)
    try:
        yield
    finally:
        _local.stack.pop()


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, grad_fn) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, result.id, out.shape, grad_fn))
    return result


def backward(tape: Tape, output: Tensor | int, seed=None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep over ``tape`` starting from ``output``.

    Returns leaf gradients keyed by tensor id and accumulates them into the
    leaves' ``grad`` slots. Uses of a tensor in several places sum.
    """
    tensors: dict[int, Tensor] = {}
    produced: dict[int, tuple[int, ...]] = {}
    for node in tape.nodes:
        produced[node.output_id] = node.output_shape
        for t in node.inputs:
            tensors[t.id] = t

    out_id = output.id if isinstance(output, Tensor) else int(output)
    if isinstance(output, Tensor):
        tensors.setdefault(out_id, output)
    if out_id in produced:
        out_shape = produced[out_id]
    elif out_id in tensors:
        out_shape = tensors[out_id].shape
    else:
        raise TapeError(f"tensor id {out_id} does not appear on the tape")

    if seed is None:
        if int(np.prod(out_shape)) != 1:
            raise TapeError(f"output of shape {out_shape} is not scalar; pass a seed gradient")
        seed_arr = np.ones(out_shape)
    else:
        seed_arr = np.array(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed_arr.shape != tuple(out_shape):
            raise ShapeError(f"seed shape {seed_arr.shape} does not match output shape {out_shape}")

    grads: dict[int, np.ndarray] = {out_id: seed_arr}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi

    for tid, g in grads.items():
        t = tensors.get(tid)
        if t is None or not t.requires_grad:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
    return {tid: g for tid, g in grads.items() if tid in tensors and tensors[tid].requires_grad}


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                      grad: np.ndarray | None = None) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central differences.

    Per coordinate the error is ``|a - n| / max(1e-8, |a| + |n|)``. Pass
    ``grad`` to check a supplied gradient instead of the tape's.
    """
    x0 = np.array(x.data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    value = out.data
    if value.size != 1:
        raise ShapeError(f"f must return a scalar, got shape {value.shape}")
    if not np.all(np.isfinite(value)):
        raise ValueError(f"f(x) is not finite: {value}")
    if grad is None:
        analytic = backward(tape, out).get(leaf.id, np.zeros_like(x0))
    else:
        analytic = np.asarray(grad, dtype=np.float64).reshape(x0.shape)

    numeric = np.empty_like(x0)
    probe = x0.copy()
    flat_probe = probe.reshape(-1)
    with no_tape():
        for i in range(x0.size):
            orig = flat_probe[i]
            flat_probe[i] = orig + step
            fp = f(Tensor(probe)).item()
            flat_probe[i] = orig - step
            fm = f(Tensor(probe)).item()
            flat_probe[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


# -- elementwise and structural ops ------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor, axes: int | Sequence[int]) -> Tensor:
    """Mean over ``axes``; the reduced axes are dropped."""
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    axes = tuple(ax % a.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return _emit("mean", (a,), a.data.mean(axis=axes), grad_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """View when the layout allows it, copy otherwise (numpy decides)."""
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _emit("transpose", (a,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


# -- linear algebra ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., R, K) x (..., K, S) -> (..., R, S) with identical leading dims."""
    if (a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, grad_fn)


def _softmax_rows_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    s = np.einsum("...i,...i->...", g, y)[..., None]
    out = g - s
    out *= y
    return out


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    y = m.data - m.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    # module-level lookup so the gradient can be swapped for fault injection
    return _emit("softmax_rows", (m,), y, lambda g: (_softmax_rows_grad(y, g),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: N x I, w: O x I, b: O."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def grad_fn(g):
        return (g @ wd, g.T @ xd, g.sum(axis=0) if b is not None else None)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", inputs, out, lambda g: grad_fn(g)[: len(inputs)])


# -- convolutions --------------------------------------------------------------------


def conv_pointwise(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution. x: N x C x H x W, w: C' x C, bias: C'."""
    if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv_pointwise: input {x.shape} incompatible with weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv_pointwise: bias {bias.shape} does not match weight {w.shape}")
    n, c, h, wd_ = x.shape
    co = w.shape[0]
    xf = x.data.reshape(n, c, h * wd_)
    wd = w.data
    out = np.matmul(wd, xf)
    if bias is not None:
        out += bias.data[None, :, None]

    def grad_fn(g):
        gf = g.reshape(n, co, h * wd_)
        gx = np.matmul(wd.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = gf.transpose(1, 0, 2).reshape(co, -1) @ xf.transpose(1, 0, 2).reshape(c, -1).T
        gb = gf.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    out = out.reshape(n, co, h, wd_)
    return _emit("conv_pointwise", inputs, out, lambda g: grad_fn(g)[: len(inputs)])


def conv_temporal(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Kx1x1 convolution along time with zero padding K//2 and stride 1.

    x: B x T x C x H x W, w: C' x C x K (K odd). Tap j reads frame
    t + j - K//2, so taps [I, 0, 0] shift the clip forward by one frame.
    """
    if x.ndim != 5 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv_temporal: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"conv_temporal: kernel length must be odd, got {k}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv_temporal: bias {bias.shape} does not match weight {w.shape}")
    b, t, c, h, wi = x.shape
    co = w.shape[0]
    p = k // 2
    xp = np.zeros((b, t + 2 * p, c, h * wi))
    xp[:, p:p + t] = x.data.reshape(b, t, c, h * wi)
    wd = w.data
    out = np.zeros((b, t, co, h * wi))
    for j in range(k):
        out += np.matmul(wd[:, :, j], xp[:, j:j + t])
    if bias is not None:
        out += bias.data[None, None, :, None]

    def grad_fn(g):
        gf = g.reshape(b, t, co, h * wi)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + t] += np.matmul(wd[:, :, j].T, gf)
            gx = gxp[:, p:p + t].reshape(x.shape)
        if w.requires_grad:
            gw = np.empty_like(wd)
            g2 = gf.transpose(2, 0, 1, 3).reshape(co, -1)
            for j in range(k):
                gw[:, :, j] = g2 @ xp[:, j:j + t].transpose(2, 0, 1, 3).reshape(c, -1).T
        if bias is not None:
            gb = gf.sum(axis=(0, 1, 3))
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    out = out.reshape(b, t, co, h, wi)
    return _emit("conv_temporal", inputs, out, lambda g: grad_fn(g)[: len(inputs)])


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int,
            groups: int) -> np.ndarray:
    """groups x (C/groups * kh * kw) x (N * Ho * Wo) patch matrix of padded ``xp``."""
    n, c = xp.shape[:2]
    cg = c // groups
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # N C Ho Wo kh kw
    cols = win.reshape(n, groups, cg, ho, wo, kh, kw).transpose(1, 2, 5, 6, 0, 3, 4)
    return np.ascontiguousarray(cols).reshape(groups, cg * kh * kw, n * ho * wo)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int):
    n, c, h, wi = x.shape
    o, cg, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wi + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, ho, wo, groups)
    out = np.matmul(w.reshape(groups, o // groups, cg * kh * kw), cols)
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols, xp


_PATCH_BUDGET = 100_000  # float64 entries per patch matrix; keeps each chunk cache-sized


def _conv2d_shifted(x: Tensor, w: Tensor, bias: Tensor | None, padding: int) -> Tensor:
    """Stride-1 ungrouped conv through a flat padded layout.

    A chunk of images is padded and laid out C x (n * Hp * Wp). In that
    layout kernel tap (i, j) is a constant column offset, so the patch matrix
    is a stack of contiguous slices. Columns that straddle a row or image
    boundary are computed and dropped. Chunks are small enough for the patch
    matrix to stay in cache; backward rebuilds patches rather than storing them.
    """
    n, c, h, wi = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wi + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    chunk = max(1, _PATCH_BUDGET // (len(offsets) * c * hp * wp))
    wm = w.data.transpose(0, 2, 3, 1).reshape(o, -1)  # O x (kh kw C), matching patch rows

    def flat(a, m):
        buf = np.zeros((a.shape[1], m, hp, wp))
        buf[:, :, padding:padding + h, padding:padding + wi] = a.transpose(1, 0, 2, 3)
        return buf.reshape(a.shape[1], m * hp * wp)

    def patches(lo, hi):
        xf = flat(x.data[lo:hi], hi - lo)
        span = xf.shape[1] - offsets[-1]
        cols = np.empty((len(offsets), c, span))
        for t, off in enumerate(offsets):
            cols[t] = xf[:, off:off + span]
        return cols.reshape(-1, span), span

    chunks = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    out = np.empty((n, o, ho, wo))
    for lo, hi in chunks:
        cols, span = patches(lo, hi)
        full = np.zeros((o, (hi - lo) * hp * wp))
        full[:, :span] = wm @ cols
        out[lo:hi] = full.reshape(o, hi - lo, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gw_m = np.zeros_like(wm) if w.requires_grad else None
        gx = np.empty(x.shape) if x.requires_grad else None
        for lo, hi in chunks:
            m = hi - lo
            gf = np.zeros((o, m, hp, wp))
            gf[:, :, :ho, :wo] = g[lo:hi].transpose(1, 0, 2, 3)
            cols, span = patches(lo, hi) if w.requires_grad else (None, m * hp * wp - offsets[-1])
            gf = gf.reshape(o, m * hp * wp)[:, :span]
            if w.requires_grad:
                gw_m += gf @ cols.T
            if x.requires_grad:
                gcols = (wm.T @ gf).reshape(len(offsets), c, span)
                gxf = np.zeros((c, m * hp * wp))
                for t, off in enumerate(offsets):
                    gxf[:, off:off + span] += gcols[t]
                gxf = gxf.reshape(c, m, hp, wp)[:, :, padding:padding + h, padding:padding + wi]
                gx[lo:hi] = gxf.transpose(1, 0, 2, 3)
        gw = gw_m.reshape(o, kh, kw, c).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", inputs, out, lambda g: grad_fn(g)[: len(inputs)])


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2D convolution. x: N x C x H x W, w: O x C/groups x kh x kw."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wi = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape} "
                         f"at groups={groups}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {w.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wi + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: output would be empty for input {x.shape}, kernel {w.shape}")
    if stride == 1 and groups == 1:
        return _conv2d_shifted(x, w, bias, padding)
    og = o // groups
    out, cols, xp = _conv_forward(x.data, w.data, stride, padding, groups)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gr = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(groups, og, n * ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(gr, cols.transpose(0, 2, 1)).reshape(w.shape)
        if x.requires_grad:
            if stride == 1 and padding <= kh - 1 and padding <= kw - 1 and kh == kw:
                # transposed conv of a stride-1 conv: flipped kernel, swapped channel roles
                wt = w.data.reshape(groups, og, cg, kh, kw)[..., ::-1, ::-1]
                wt = wt.transpose(0, 2, 1, 3, 4).reshape(c, og, kh, kw)
                gx = _conv_forward(g, np.ascontiguousarray(wt), 1, kh - 1 - padding, groups)[0]
            else:
                wm = w.data.reshape(groups, og, cg * kh * kw)
                gcols = np.matmul(wm.transpose(0, 2, 1), gr)
                gcols = gcols.reshape(groups, cg, kh, kw, n, ho, wo).transpose(4, 0, 1, 2, 3, 5, 6)
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros(xp.shape)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + wi]
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", inputs, out, lambda g: grad_fn(g)[: len(inputs)])


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H and W must be multiples of k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: spatial dims of {x.shape} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def grad_fn(g):
        ge = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (n, c, h // k, k, w // k, k))
        return (ge.reshape(n, c, h, w),)

    return _emit("avgpool2d", (x,), out, grad_fn)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift on N x C x H x W (inference-form batch norm)."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channel_affine: {gamma.shape}/{beta.shape} vs input {x.shape}")
    gd = gamma.data[None, :, None, None]
    xd = x.data
    out = xd * gd + beta.data[None, :, None, None]
    return _emit("channel_affine", (x, gamma, beta), out,
                 lambda g: (g * gd, (g * xd).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / labels.size),)

    return _emit("cross_entropy", (logits,), np.array(loss), grad_fn)
