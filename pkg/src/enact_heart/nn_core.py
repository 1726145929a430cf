"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Operations are eager. Whenever an input requires a gradient the op appends
``(output, inputs, vjp)`` to the current thread's :class:`GradTape`;
:func:`backward` replays that record in reverse and then clears it.
"""

from __future__ import annotations

import math
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import CheckpointError, NonScalarLoss, ShapeMismatch

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def mean(self, axis=None):
        return mean(self, axis)

    def sum(self, axis=None):
        return sum_(self, axis)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class GradTape:
    """Ordered record of executed ops; inputs always precede their consumers."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self):
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.entries.append((out, inputs, vjp))

    def clear(self) -> None:
        self.entries.clear()


_local = threading.local()


def current_tape() -> GradTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = GradTape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(out, inputs, vjp)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient."""
    tape = current_tape()
    if loss.data.size != 1:
        tape.clear()
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced: set[int] = set()
    try:
        for out, inputs, vjp in reversed(tape.entries):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = inp
        for key, g in grads.items():
            if key in produced:
                continue
            t = holders[key]
            t.grad = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def vjp_const(g):
            return (g * c,)

        return _result(a.data * c, (a,), vjp_const)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # one GEMM over all leading axes
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        a2 = None
        out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a2 is not None:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``[..., n_in]`` and a 2-D ``w``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeMismatch(
            f"linear: x {x.shape}, w {w.shape}, b {None if b is None else b.shape}"
        )
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, np.ones(g2.shape[0], dtype=g2.dtype) @ g2

    return _result(out, inputs, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), vjp)


def index(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing and slicing."""
    out = x.data[key]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _result(np.array(out, copy=True), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _result(out, tensors, vjp)


def sum_(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = x.data.mean(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _result(np.asarray(out), (x,), vjp)


def relu(x: Tensor) -> Tensor:
    def vjp(g):
        return (g * (x.data > 0),)

    return _result(np.maximum(x.data, 0), (x,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form, 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    a = x.data
    a2 = a * a
    t = a2 * 0.044715
    t += 1.0
    t *= a
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= 0.5 * a

    def vjp(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 * 0.044715 x^2)
        d = a2 * 0.134145
        d += 1.0
        d *= _GELU_C
        d *= 1.0 - t * t
        d *= a
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return _result(out, (x,), vjp)


def _rowsum(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims. A GEMV is much faster than ``sum(-1)`` here."""
    return (a @ np.ones(a.shape[-1], dtype=a.dtype))[..., None]


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    e = np.subtract(a, a.max(axis=axis, keepdims=True))
    np.exp(e, out=e)
    if axis in (-1, a.ndim - 1):
        e *= 1.0 / _rowsum(e)
    else:
        e *= 1.0 / e.sum(axis=axis, keepdims=True)
    return e


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(x.data, axis)
    last = axis in (-1, x.ndim - 1)

    def vjp(g):
        gs = g * s
        out = g - (_rowsum(gs) if last else gs.sum(axis=axis, keepdims=True))
        out *= s
        return (out,)

    return _result(s, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    centered = x.data - _rowsum(x.data) * (1.0 / d)
    inv = _rowsum(centered * centered)
    inv *= 1.0 / d
    inv += eps
    np.sqrt(inv, out=inv)
    np.divide(1.0, inv, out=inv)
    xhat = centered
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def vjp(g):
        gx = None
        flat_g = g.reshape(-1, d)
        ones = np.ones(flat_g.shape[0], dtype=g.dtype)
        if x.requires_grad:
            gh = g * gamma.data
            gx = gh - _rowsum(gh) * (1.0 / d)
            gh *= xhat
            gx -= xhat * (_rowsum(gh) * (1.0 / d))
            gx *= inv
        return gx, ones @ (flat_g * xhat.reshape(-1, d)), ones @ flat_g

    return _result(out, (x, gamma, beta), vjp)


def dropout(x: Tensor, rate: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0.

    ``rng`` is a :class:`numpy.random.Generator` or an integer seed.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * (1.0 / (1.0 - rate))

    def vjp(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), vjp)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, valid-padding cross-correlation.

    ``x`` is ``[B, C, H, W]``, ``w`` is ``[O, C, kh, kw]``, ``b`` is ``[O]``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape}, weight {w.shape}")
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if kh > h or kw > wd:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")
    if b is not None and b.shape != (o,):
        raise ShapeMismatch(f"conv2d: bias {b.shape} for {o} output channels")
    ho, wo = h - kh + 1, wd - kw + 1
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    # [B, C, Ho, Wo, kh, kw] -> [B, C*kh*kw, Ho*Wo]; same column order as w.reshape(o, -1)
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3)).transpose(0, 1, 4, 5, 2, 3)
    cols = np.ascontiguousarray(win).reshape(bsz, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(bsz, o, ho, wo)
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g3 = g.reshape(bsz, o, ho * wo)
        gw = gx = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = (wmat.T @ g3).reshape(bsz, c, kh * kw, ho, wo)
            gx = np.zeros_like(x.data)
            for n, (i, j) in enumerate(offsets):
                gx[:, :, i : i + ho, j : j + wo] += gcols[:, :, n]
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return _result(out, inputs, vjp)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling; trailing rows/cols dropped.

    The gradient goes to the first maximal element of each window (row-major).
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects [B, C, H, W], got {x.shape}")
    h2, w2 = x.shape[2] // size, x.shape[3] // size
    if h2 == 0 or w2 == 0:
        raise ShapeMismatch(f"maxpool2d: input {x.shape[2:]} smaller than window {size}")
    offsets = [(i, j) for i in range(size) for j in range(size)]
    views = [x.data[:, :, i : h2 * size : size, j : w2 * size : size] for i, j in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def vjp(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(offsets, views):
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, :, i : h2 * size : size, j : w2 * size : size] = g * hit
        return (gx,)

    return _result(out, (x,), vjp)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of ``[B, K]`` logits against one-hot (or integer) targets."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.ndim == 1:
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        onehot[np.arange(len(y)), y.astype(int)] = 1
        y = onehot
    if y.shape != logits.shape:
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, targets {y.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -(y * logp).sum() / n

    def vjp(g):
        return (g * (np.exp(logp) - y) / n,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(2.0),
                    dtype=DEFAULT_DTYPE):
    """Uniform(-b, b) with b = gain * sqrt(3 / fan_in)."""
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. ``None`` grads count as zero."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"adam: grad {g.shape} for parameter {p.name or '?'} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

MAGIC = b"EHT1"


def encode_checkpoint(named: Iterable[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC]
    for name, arr in named:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("missing EHT1 magic")
    out: dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise CheckpointError(f"truncated data for {name}")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save_checkpoint(path, named: Iterable[tuple[str, np.ndarray]]) -> None:
    from .io_util import atomic_write_bytes

    atomic_write_bytes(path, encode_checkpoint(named))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
