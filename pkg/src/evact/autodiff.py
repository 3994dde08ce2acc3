"""A deliberately small reverse-mode tensor engine on top of numpy.

Only the operations the CRUE pipeline needs are provided. Every op records
a closure that maps the output gradient to its inputs' gradients; calling
:func:`backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every leaf that requires it.

Correctness is established against central finite differences
(:func:`gradcheck`), not by construction.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path

import numpy as np

from .errors import DegenerateStd, FormatError, IoError, ShapeError, StateError

DTYPE = np.float64
STD_FLOOR = 1e-12
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __pow__(self, k): return power(self, k)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, None, parents, backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shapes(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** k, (a,), lambda g: (g * k * a.data ** (k - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-free logistic
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * sig,))


def smooth_l1(d) -> Tensor:
    """Elementwise Huber-style penalty with unit transition point."""
    d = as_tensor(d)
    ad = np.abs(d.data)
    quad = ad < 1.0
    out = np.where(quad, 0.5 * d.data ** 2, ad - 0.5)
    return _make(out, (d,), lambda g: (g * np.where(quad, d.data, np.sign(d.data)),))


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(a % ndim for a in axes)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(items, axis=0) -> Tensor:
    items = [as_tensor(t) for t in items]
    try:
        out = np.concatenate([t.data for t in items], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in items]}: {exc}") from None
    cuts = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _make(out, tuple(items), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(items, axis=0) -> Tensor:
    items = [as_tensor(t) for t in items]
    try:
        out = np.stack([t.data for t in items], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot stack shapes {[t.shape for t in items]}: {exc}") from None
    n = len(items)
    return _make(out, tuple(items),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    va, vb = a.ndim == 1, b.ndim == 1
    ad = a.data[None, :] if va else a.data
    bd = b.data[:, None] if vb else b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(ad, bd)
    if va:
        out = out[..., 0, :]
    if vb:
        out = out[..., 0]

    def bw(g):
        if va:
            g = np.expand_dims(g, -2)
        if vb:
            g = np.expand_dims(g, -1)
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return (ga[0] if va else ga, gb[:, 0] if vb else gb)

    return _make(out, (a, b), bw)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < max(a.ndim, 1):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def mean_std_normalize(a, axis=-1) -> Tensor:
    """``(a - mean) / std`` along ``axis`` with the population std.

    Raises DegenerateStd when any slice has std below 1e-12.
    """
    a = as_tensor(a)
    centred = a - mean(a, axis=axis, keepdims=True)
    var = mean(centred * centred, axis=axis, keepdims=True)
    if np.any(np.sqrt(var.data) < STD_FLOOR):
        raise DegenerateStd("cannot normalise a vector with zero standard deviation")
    return centred / sqrt(var)


def l2_normalize(a, axis=-1, eps=1e-12) -> Tensor:
    a = as_tensor(a)
    return a / sqrt(tsum(a * a, axis=axis, keepdims=True) + eps)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if not isinstance(loss, Tensor):
        raise StateError(f"backward expects a Tensor, got {type(loss).__name__}")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise StateError("no recorded forward pass reaches a trainable parameter")

    order, seen = [], set()
    stack_ = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            grads[id(p)] = grads[id(p)] + pg if id(p) in grads else pg


# ---------------------------------------------------------------------------
# parameters and layers

CKP1_MAGIC = b"CKP1"


class ParamStore:
    """Ordered named parameters with gradient buffers and a seeded initialiser RNG."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-limit, limit, (fan_in, fan_out)))

    def zeros(self, name: str, *shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Zero the buffers, back-propagate ``loss`` and return ``{name: grad}``."""
        self.zero_grad()
        backward(loss)
        return {k: p.grad for k, p in self._params.items()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            p = self._params[k]
            v = np.asarray(v, dtype=DTYPE)
            if v.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != parameter shape {p.shape}")
            p.data = v.copy()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())


def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    """CKP1: magic, then per entry (u16 name length, utf-8 name, u8 rank, u32 dims, f32 data)."""
    parts = [CKP1_MAGIC]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != CKP1_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {CKP1_MAGIC!r}")
    out, off = {}, 4
    try:
        while off < len(raw):
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(raw):
                raise FormatError(f"truncated data for {name!r}")
            out[name] = np.frombuffer(raw, "<f4", size, off).reshape(dims).astype(DTYPE)
            off += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    return out


def save_checkpoint(store: ParamStore, path) -> None:
    try:
        Path(path).write_bytes(encode_checkpoint(store.state()))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(store: ParamStore, path) -> None:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    store.load_state(decode_checkpoint(raw))


class Mlp2:
    """affine -> ReLU -> affine."""

    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_hidden: int, d_out: int):
        self.prefix = prefix
        self.d_in, self.d_hidden, self.d_out = d_in, d_hidden, d_out
        self.w1 = store.glorot(f"{prefix}.w1", d_in, d_hidden)
        self.b1 = store.zeros(f"{prefix}.b1", d_hidden)
        self.w2 = store.glorot(f"{prefix}.w2", d_hidden, d_out)
        self.b2 = store.zeros(f"{prefix}.b2", d_out)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.prefix}: expected last dim {self.d_in}, got shape {x.shape}")
        return relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class AttentionBlock:
    """Single-head scaled dot-product self-attention with an output projection."""

    def __init__(self, store: ParamStore, prefix: str, dim: int):
        self.prefix, self.dim = prefix, dim
        for p in "qkvo":
            setattr(self, f"w{p}", store.glorot(f"{prefix}.w{p}", dim, dim))
            setattr(self, f"b{p}", store.zeros(f"{prefix}.b{p}", dim))

    def __call__(self, x) -> Tensor:
        return self_attention(self, x)


def attention_weights(block: AttentionBlock, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != block.dim:
        raise ShapeError(f"{block.prefix}: expected (..., L, {block.dim}), got {x.shape}")
    q = x @ block.wq + block.bq
    k = x @ block.wk + block.bk
    return softmax((q @ k.T) * (1.0 / np.sqrt(block.dim)), axis=-1)


def self_attention(block: AttentionBlock, x) -> Tensor:
    """softmax(Q K^T / sqrt(D)) V followed by the output projection; x is (..., L, D)."""
    x = as_tensor(x)
    a = attention_weights(block, x)
    v = x @ block.wv + block.bv
    return (a @ v) @ block.wo + block.bo


# ---------------------------------------------------------------------------
# finite-difference oracle

def numerical_grad(f, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``param``."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(f, store: ParamStore, h: float = 1e-5, names=None) -> dict[str, float]:
    """Worst ``|analytic - fd| / max(1, |analytic|)`` per parameter of ``store``.

    ``f`` must be a deterministic closure returning the scalar loss.
    """
    grads = store.backward(f())
    report = {}
    for name in names or store.names():
        p = store[name]
        fd = numerical_grad(f, p, h)
        an = grads[name]
        report[name] = float(np.max(np.abs(an - fd) / np.maximum(1.0, np.abs(an)))) if an.size else 0.0
    return report
