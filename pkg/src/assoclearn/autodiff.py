"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive checks its output for NaN/Inf and raises
``FloatingPointError`` instead of propagating non-finite values.

Convolutions, pooling and upsampling accept either a single image
``[C, H, W]`` or a batch ``[N, C, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class Tensor:
    """A float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "slot")

    def __init__(self, data, tape: "Tape | None" = None, slot: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.slot = slot

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tracked = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


@dataclass(frozen=True)
class _Node:
    out: int
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of executed primitives.

    Slots are allocated in execution order, so the node list is already
    topologically sorted and backward is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._num_slots = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def _new_slot(self) -> int:
        self._num_slots += 1
        return self._num_slots - 1

    def watch(self, name: str, value) -> Tensor:
        """Register a named leaf whose gradient :func:`backward` reports."""
        if name in self.leaves:
            raise ValueError(f"leaf {name!r} already watched on this tape")
        data = np.array(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        slot = self._new_slot()
        self.leaves[name] = (slot, data.shape)
        return Tensor(data, self, slot)

    def watch_params(self, params: Mapping[str, object], prefix: str = "") -> dict[str, Tensor]:
        return {name: self.watch(prefix + name, value) for name, value in params.items()}

    def record(self, op: str, out: np.ndarray, inputs: Sequence[object], vjp) -> Tensor:
        slots = tuple(t.slot if isinstance(t, Tensor) and t.tape is self else None for t in inputs)
        slot = self._new_slot()
        self.nodes.append(_Node(slot, slots, vjp, op))
        return Tensor(out, self, slot)


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to every watched leaf.

    Leaves the loss does not depend on receive zero gradients. The tape is
    not modified, so calling this twice yields identical results.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * tape._num_slots
    grads[loss.slot] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads[node.out]
        if g is None:
            continue
        for slot, part in zip(node.inputs, node.vjp(g)):
            if slot is None or part is None:
                continue
            grads[slot] = part if grads[slot] is None else grads[slot] + part
    return {name: Tensor(np.zeros(shape) if grads[slot] is None else grads[slot])
            for name, (slot, shape) in tape.leaves.items()}


# ---------------------------------------------------------------------------
# primitive plumbing


def _value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and x.tape is not None


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = x.tape
    return tape


def _finish(op: str, out: np.ndarray, inputs: Sequence[object], vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: non-finite value in output")
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(op, out, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _finish("add", av + bv, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _finish("sub", av - bv, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _finish("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a) -> Tensor:
    return _finish("neg", -_value(a), (a,), lambda g: (-g,))


def square(a) -> Tensor:
    av = _value(a)
    return _finish("square", av * av, (a,), lambda g: (2.0 * av * g,))


def log(a) -> Tensor:
    av = _value(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _finish("log", out, (a,), lambda g: (g / av,))


def exp(a) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(_value(a))
    return _finish("exp", out, (a,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    xv = _value(x)
    slope = np.where(xv > 0, 1.0, alpha)
    return _finish("leaky_relu", xv * slope, (x,), lambda g: (g * slope,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    s = _sigmoid(_value(x))
    return _finish("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    t = np.tanh(_value(x))
    return _finish("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def softplus(x) -> Tensor:
    """``log(1 + exp(x))``; ``softplus(-z) == -log(sigmoid(z))`` without underflow."""
    xv = _value(x)
    out = np.maximum(xv, 0.0) + np.log1p(np.exp(-np.abs(xv)))
    return _finish("softplus", out, (x,), lambda g: (g * _sigmoid(xv),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xv = _value(x)
    out = np.sum(xv, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        gx = np.expand_dims(g, tuple(a % xv.ndim for a in axes))
        return (np.broadcast_to(gx, xv.shape).copy(),)

    return _finish("sum", np.asarray(out), (x,), vjp)


def mean(x, axis=None) -> Tensor:
    xv = _value(x)
    if axis is None:
        n = xv.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([xv.shape[a] for a in axes]))
    return mul(sum(x, axis=axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    xv = _value(x)
    return _finish("reshape", xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def concat(xs: Sequence[object], axis: int) -> Tensor:
    vals = [_value(x) for x in xs]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _finish("concat", np.concatenate(vals, axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence[object]) -> Tensor:
    vals = [_value(x) for x in xs]
    return _finish("stack", np.stack(vals), tuple(xs),
                   lambda g: tuple(g[i] for i in range(len(vals))))


def dense(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for ``x [N, F]``, ``weight [F, O]``, ``bias [O]``."""
    xv, wv, bv = _value(x), _value(weight), _value(bias)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ValueError(f"dense: input features {xv.shape} do not match weight {wv.shape}")
    if bv.shape != (wv.shape[1],):
        raise ValueError(f"dense: bias shape {bv.shape} != ({wv.shape[1]},)")
    need_x, need_w = _tracked(x), _tracked(weight)
    return _finish("dense", xv @ wv + bv, (x, weight, bias),
                   lambda g: (g @ wv.T if need_x else None, xv.T @ g if need_w else None, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# spatial ops


def _as_batch(v: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if v.ndim == 3:
        return v[None], True
    if v.ndim == 4:
        return v, False
    raise ValueError(f"{op}: expected [C,H,W] or [N,C,H,W], got rank {v.ndim}")


# Two equivalent lowerings of the zero-padded correlation. Narrow inputs use
# explicit im2col columns; wide inputs run one GEMM per kernel tap over a
# channel-major padded buffer, where every tap is a contiguous column shift.
_SHIFT_MIN_CHANNELS = 4


def _columns(x: np.ndarray, k: int) -> np.ndarray:
    # [N,C,H,W] -> [N, C*k*k, H*W]
    n, c, h, w = x.shape
    if k == 1:
        return x.reshape(n, c, h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.stack([xp[:, :, i:i + h, j:j + w] for i in range(k) for j in range(k)], axis=2)
    return cols.reshape(n, c * k * k, h * w)


def _shift_buffer(x: np.ndarray, k: int, p: int) -> np.ndarray:
    # [N,C,H,W] -> [C, N*Hp*Wp + tail] with x at offset (p, p) of each padded frame
    n, c, h, w = x.shape
    hp, wp = h + 2 * p, w + 2 * p
    size = n * hp * wp
    buf = np.zeros((c, size + (k - 1) * wp + (k - 1)))
    buf[:, :size].reshape(c, n, hp, wp)[:, :, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3)
    return buf


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """[N,C,H,W] (*) [O,C,k,k] -> [N,O,H,W], same-size zero padding."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if c < _SHIFT_MIN_CHANNELS or k == 1:
        return np.matmul(w.reshape(o, -1), _columns(x, k)).reshape(n, o, h, wd)
    p = k // 2
    wp = wd + 2 * p
    size = n * (h + 2 * p) * wp
    buf = _shift_buffer(x, k, p)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    out = np.zeros((o, size))
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            out += taps[i, j] @ buf[:, off:off + size]
    return out.reshape(o, n, h + 2 * p, wp)[:, :, :h, :wd].transpose(1, 0, 2, 3)


def _kernel_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """d(sum(g * correlate(x, w)))/dw, shape [O,C,k,k]."""
    n, c, h, wd = x.shape
    o = g.shape[1]
    if c < _SHIFT_MIN_CHANNELS or k == 1:
        cols = _columns(x, k)
        return np.matmul(g.reshape(n, o, -1), cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, k, k)
    p = k // 2
    hp, wp = h + 2 * p, wd + 2 * p
    size = n * hp * wp
    buf = _shift_buffer(x, k, p)
    gbuf = np.zeros((o, size))
    gbuf.reshape(o, n, hp, wp)[:, :, :h, :wd] = g.transpose(1, 0, 2, 3)
    gw = np.empty((k, k, o, c))
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            gw[i, j] = gbuf @ buf[:, off:off + size].T
    return gw.transpose(2, 3, 0, 1)


def conv2d_same(x, kernels, bias) -> Tensor:
    """Stride-1 cross-correlation with zero padding that preserves H and W."""
    xv, single = _as_batch(_value(x), "conv2d_same")
    wv, bv = _value(kernels), _value(bias)
    if wv.ndim != 4:
        raise ValueError(f"conv2d_same: kernels must be [O,C,k,k], got rank {wv.ndim}")
    o, c, kh, kw = wv.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d_same: kernel size must be odd and square, got {kh}x{kw}")
    if xv.shape[1] != c:
        raise ValueError(f"conv2d_same: input channels C={xv.shape[1]} but kernels expect C={c}")
    if bv.shape != (o,):
        raise ValueError(f"conv2d_same: bias has shape {bv.shape}, expected O={o}")
    out = _correlate(xv, wv) + bv[None, :, None, None]
    need_x, need_w = _tracked(x), _tracked(kernels)

    def vjp(g):
        gb = g[None] if single else g
        gw = gx = None
        if need_w:
            gw = _kernel_grad(xv, gb, kh)
        if need_x:
            gx = _correlate(gb, wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = gx[0] if single else gx
        return (gx, gw, gb.sum(axis=(0, 2, 3)))

    return _finish("conv2d_same", out[0] if single else out, (x, kernels, bias), vjp)


def pool_avg2(x) -> Tensor:
    xv, single = _as_batch(_value(x), "pool_avg2")
    n, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ValueError(f"pool_avg2: spatial dims must be even, got H={h}, W={w}")
    out = xv.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        gb = g[None] if single else g
        gx = np.repeat(np.repeat(gb, 2, axis=2), 2, axis=3) * 0.25
        return (gx[0] if single else gx,)

    return _finish("pool_avg2", out[0] if single else out, (x,), vjp)


def upsample_nearest2(x) -> Tensor:
    xv, single = _as_batch(_value(x), "upsample_nearest2")
    n, c, h, w = xv.shape
    out = np.repeat(np.repeat(xv, 2, axis=2), 2, axis=3)

    def vjp(g):
        gb = g[None] if single else g
        gx = gb.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return (gx[0] if single else gx,)

    return _finish("upsample_nearest2", out[0] if single else out, (x,), vjp)
