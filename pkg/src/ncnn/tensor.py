"""
Reverse-mode automatic differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``tape.backward(loss)`` replays them in reverse and accumulates gradients into
every tensor created with ``requires_grad=True`` (and every intermediate that
depends on one). Outside a tape, the same functions simply compute forward
values, which keeps inference cheap.

All image ops accept either a single ``(C, H, W)`` array or a batch
``(N, C, H, W)``; dense accepts ``(in,)`` or ``(N, in)``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

LOG_CLAMP = 1e-12

_state = threading.local()


class Tensor:
    """An n-dimensional float64 array with an optional gradient."""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed ops, used as a context manager.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tensor_sum(x)
    >>> tape.backward(loss)
    >>> x.grad
    array([1., 1.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._previous = None

    def __enter__(self):
        self._previous = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._previous
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Optional[Tape]:
    return getattr(_state, "tape", None)


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) through every op on ``tape``.

    Gradients are added to any existing ``.grad``; call ``zero_grad`` on the
    leaves first when a fresh gradient is wanted.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.values)}
    seen = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        _deposit(node.output, g_out)
        for tensor, g_in in zip(node.inputs, node.backward(g_out)):
            if g_in is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in
                seen[key] = tensor
    # whatever is left are leaves (parameters, inputs) or the loss itself
    for key, g in grads.items():
        _deposit(seen[key], g)


def _deposit(tensor: Tensor, g: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64).reshape(tensor.values.shape)
    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def _record(op, inputs, out_values, backward_fn) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.grad = None
    out.requires_grad = needs_grad
    out.name = None
    if needs_grad:
        tape.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record("add", (a, b), a.values + b.values, lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.values, b.values
    return _record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", (a,), a.values * factor, lambda g: (g * factor,))


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record("sum", (a,), np.array(a.values.sum()), lambda g: (np.broadcast_to(g, shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", (a,), a.values.reshape(shape), lambda g: (g.reshape(old),))


def flatten(a) -> Tensor:
    """Flatten all but the leading batch axis of a 4-D input (or everything for 3-D)."""
    a = as_tensor(a)
    if a.values.ndim == 4:
        return reshape(a, (a.shape[0], -1))
    return reshape(a, (-1,))


def take(a, index) -> Tensor:
    """Select ``a[..., index]`` (e.g. one logit) keeping gradient flow."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[..., index] = g
        return (full,)

    return _record("take", (a,), a.values[..., index].copy(), back)


def concat(tensors, axis) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _record("relu", (x,), np.where(mask, x.values, 0.0), lambda g: (g * mask,))


def dropout(x, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout. ``rng=None`` or ``rate == 0`` is the identity."""
    x = as_tensor(x)
    if rng is None or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate {rate} outside [0, 1)")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", (x,), x.values * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# layers


def _batched(x: Tensor, op: str):
    if x.values.ndim == 3:
        return x.values[None], True
    if x.values.ndim == 4:
        return x.values, False
    raise DimensionError(f"{op}: expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def conv2d(x, kernels, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. Output extent is ``(H + 2p - kH) // stride + 1``."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xv, single = _batched(x, "conv2d")
    w = kernels.values
    if w.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be (F,C,kH,kW), got {w.shape}")
    n, c, h, wd = xv.shape
    f, kc, kh, kw = w.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernels expect {kc}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be positive and padding non-negative")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}+{padding}")

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    span_h, span_w = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    # im2col per image: rows are (C, kh, kw) taps, columns are output positions
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
    cols = cols.reshape(n, c * kh * kw, oh * ow)
    wm = w.reshape(f, -1)
    out = (np.matmul(wm, cols) + bias.values[:, None]).reshape(n, f, oh, ow)

    def back(g):
        gm = (g[None] if single else g).reshape(n, f, oh * ow)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = gm.sum(axis=(0, 2))
        if not x.requires_grad:
            return (None, gw, gb)
        gcols = np.matmul(wm.T, gm).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx[0] if single else gx, gw, gb)

    return _record("conv2d", (x, kernels, bias), out[0] if single else out, back)


def _maxpool_tiled(x: Tensor, xv: np.ndarray, single: bool, k: int, oh: int, ow: int) -> Tensor:
    """Non-overlapping windows, viewed as a (N, C, oh, k, ow, k) array."""
    n, c = xv.shape[:2]
    tiles = xv[:, :, :oh * k, :ow * k].reshape(n, c, oh, k, ow, k)
    out = tiles[:, :, :, 0, :, 0].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                np.maximum(out, tiles[:, :, :, i, :, j], out=out)

    def back(g):
        g4 = g[None] if single else g
        gt = np.zeros((n, c, oh, k, ow, k))
        taken = np.zeros(out.shape, dtype=bool)
        # row-major scan so the first maximal element of each window wins
        for i in range(k):
            for j in range(k):
                hit = (tiles[:, :, :, i, :, j] == out) & ~taken
                taken |= hit
                gt[:, :, :, i, :, j] = g4 * hit
        if (oh * k, ow * k) == xv.shape[2:]:
            gx = gt.reshape(xv.shape)
        else:
            gx = np.zeros_like(xv)
            gx[:, :, :oh * k, :ow * k] = gt.reshape(n, c, oh * k, ow * k)
        return (gx[0] if single else gx,)

    return _record("maxpool2d", (x,), out[0] if single else out, back)


def maxpool2d(x, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over ``window x window`` patches; gradient goes to the first maximum."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    xv, single = _batched(x, "maxpool2d")
    n, c, h, wd = xv.shape
    if window < 1 or stride < 1:
        raise ContractError("maxpool2d: window and stride must be positive")
    if window > h or window > wd:
        raise DimensionError(f"maxpool2d: window {window} larger than input {h}x{wd}")
    oh = (h - window) // stride + 1
    ow = (wd - window) // stride + 1
    if stride == window:
        return _maxpool_tiled(x, xv, single, window, oh, ow)
    taps = [
        xv[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
        for i in range(window)
        for j in range(window)
    ]
    out = taps[0].copy()
    for tap in taps[1:]:
        np.maximum(out, tap, out=out)

    def back(g):
        g4 = g[None] if single else g
        gx = np.zeros_like(xv)
        taken = np.zeros(out.shape, dtype=bool)
        # row-major scan so the first maximal element of each window wins
        for k, tap in enumerate(taps):
            hit = (tap == out) & ~taken
            taken |= hit
            i, j = divmod(k, window)
            gx[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += np.where(hit, g4, 0.0)
        return (gx[0] if single else gx,)

    return _record("maxpool2d", (x,), out[0] if single else out, back)


def dense(x, weights, bias) -> Tensor:
    """Affine map ``weights @ x + bias`` over the last axis."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    w = weights.values
    if w.ndim != 2 or x.values.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    if bias.shape != (w.shape[0],):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({w.shape[0]},)")
    xv = x.values
    out = xv @ w.T + bias.values

    def back(g):
        if xv.ndim == 1:
            return (g @ w, np.outer(g, xv), g)
        return (g @ w, g.T @ xv, g.sum(axis=0))

    return _record("dense", (x, weights, bias), out, back)


def softmax(logits) -> Tensor:
    """Max-shifted softmax over the last axis."""
    logits = as_tensor(logits)
    if logits.shape[-1] < 2:
        raise DimensionError("softmax needs at least two classes")
    z = logits.values - logits.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (logits,), s, back)


def cross_entropy_soft(predicted, target) -> Tensor:
    """Mean over the batch of ``-sum_k target_k * ln(predicted_k + 1e-12)``.

    ``target`` is a plain array of probability vectors and gets no gradient.
    """
    predicted = as_tensor(predicted)
    t = np.asarray(target.values if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != predicted.shape:
        raise DimensionError(f"cross_entropy_soft: target {t.shape} vs predicted {predicted.shape}")
    p = predicted.values
    rows = 1 if p.ndim == 1 else p.shape[0]
    loss = -(t * np.log(p + LOG_CLAMP)).sum() / rows

    def back(g):
        return (-g * t / (p + LOG_CLAMP) / rows,)

    return _record("cross_entropy_soft", (predicted,), np.array(loss), back)
