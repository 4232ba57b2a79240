"""Differentiable tensor substrate with reverse-mode gradients.

Dense ops (matmul, softmax, layer norm, GELU, conv2d, bilinear resize, ...)
wrap numpy arrays in ``Tensor`` nodes that record a tape; ``backward`` walks
the tape in reverse topological order. Training runs in float32; float64 is
supported for finite-difference gradient checking (``grad_check``).

Randomness comes from ``Rng``, a counter-based splittable generator: a
(seed, stream) pair names an independent Philox sequence and children are
split off by name, so draw order never couples unrelated consumers.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np

LARGE_NEG = -1e9  # additive mask value; exp() underflows to exactly 0.0

_GRAD_ENABLED = [True]


class NumericsError(ValueError):
    pass


class no_grad:
    """Context manager: ops inside build no tape (inference mode)."""

    def __enter__(self):
        self.prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self.prev
        return False


# ---------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, s):
        if isinstance(s, Tensor):
            raise NumericsError("div: only scalar divisors are supported")
        return mul(self, 1.0 / s)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def tensor(data, dtype=np.float32, requires_grad=False):
    """Public leaf constructor; rejects non-finite values at the boundary."""
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise NumericsError("tensor: non-finite values rejected")
    return Tensor(arr, requires_grad=requires_grad)


def _node(data, parents, vjp):
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtype(op, *ts):
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise NumericsError(
                f"{op}: mixed dtypes {dt} vs {t.data.dtype}; run fully in one precision"
            )
    return dt


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Reverse-mode sweep from a scalar; accumulates .grad on leaves."""
    if loss.data.shape != ():
        raise NumericsError(f"backward: root must be scalar, got shape {loss.data.shape}")
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g
        node.grad = None  # free intermediates


# ---------------------------------------------------------------------------
# Elementwise / linear ops


def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtype("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtype("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), vjp)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtype("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(out, (a, b), vjp)


def matmul(a, b):
    _check_dtype("matmul", a, b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise NumericsError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(out, (a, b), vjp)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), vjp)


def transpose(a, axes):
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), vjp)


def concat(tensors, axis):
    _check_dtype("concat", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), vjp)


def getitem(a, key):
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(out, (a,), vjp)


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization


def softmax(a):
    """Softmax over the last axis. Additive masks (0 / LARGE_NEG) are applied
    to the input beforehand; masked entries underflow to exactly 0 weight."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), vjp)


def layernorm(a, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    out = xc * inv
    n = x.shape[-1]

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return ((g - gm - out * gy) * inv,)

    return _node(out, (a,), vjp)


def gelu(a):
    from scipy.special import erf

    x = a.data
    phi = 0.5 * (1.0 + erf(x / np.sqrt(np.asarray(2.0, dtype=x.dtype))))
    out = x * phi

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(np.asarray(2.0 * np.pi, dtype=x.dtype))
        return (g * (phi + x * pdf),)

    return _node(out.astype(x.dtype), (a,), vjp)


def sigmoid(a):
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    out = out.astype(x.dtype)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp)


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy; targets in {0,1} are constants."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise NumericsError(
            f"bce_with_logits: shape mismatch logits {logits.data.shape} vs targets {t.shape}"
        )
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def vjp(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        return (g * (s.astype(z.dtype) - t),)

    return _node(out.astype(z.dtype), (logits,), vjp)


def embedding(table, ids):
    """Row lookup into a (V, d) table with integer ids of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise NumericsError(
            f"embedding: id out of range for table with {table.data.shape[0]} rows"
        )
    out = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (full,)

    return _node(out, (table,), vjp)


def clip01(a):
    """Clamp to [0,1]; gradient passes only through the interior."""
    x = a.data
    out = np.clip(x, 0.0, 1.0)

    def vjp(g):
        return (g * ((x > 0.0) & (x < 1.0)),)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# Convolution and resize


def conv2d(x, w, b, stride=1, padding=1):
    """NHWC conv with (k, k, Cin, Cout) weights, symmetric zero padding."""
    k = w.data.shape[0]
    if w.data.shape[2] != x.data.shape[3]:
        raise NumericsError(f"conv2d: channel mismatch x {x.data.shape} w {w.data.shape}")
    _check_dtype("conv2d", x, w, b)
    B, H, W, _ = x.data.shape
    ho = (H + 2 * padding - k) // stride + 1
    wo = (W + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = np.zeros((B, ho, wo, w.data.shape[3]), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            sl = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
            out += sl @ w.data[i, j]
    out += b.data

    def vjp(g):
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                sl = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
                gw[i, j] = np.einsum("bhwc,bhwo->co", sl, g)
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (
                    g @ w.data[i, j].T
                )
        gx = gxp[:, padding : padding + H, padding : padding + W, :] if padding else gxp
        return gx, gw, g.sum(axis=(0, 1, 2))

    return _node(out, (x, w, b), vjp)


@lru_cache(maxsize=None)
def _resize_matrix_f64(n_in, n_out):
    """1-D bilinear interpolation matrix (n_out, n_in), antialiased when
    shrinking; rows sum to 1. Identity when n_in == n_out."""
    if n_in == n_out:
        return np.eye(n_in)
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    support = max(1.0, scale)  # widen the triangle kernel when shrinking
    for o in range(n_out):
        center = (o + 0.5) * scale - 0.5
        lo = int(np.floor(center - support)) + 1
        hi = int(np.ceil(center + support))
        for i in range(lo, hi):
            wgt = max(0.0, 1.0 - abs(i - center) / support)
            if wgt > 0.0:
                m[o, min(max(i, 0), n_in - 1)] += wgt
        m[o] /= m[o].sum()
    return m


def resize_matrix(n_in, n_out, dtype=np.float32):
    return _resize_matrix_f64(n_in, n_out).astype(dtype)


def resize_bilinear_np(x, out_hw):
    """Plain-numpy bilinear resize of (..., H, W, C) grids."""
    h2, w2 = out_hw
    ah = resize_matrix(x.shape[-3], h2, x.dtype)
    aw = resize_matrix(x.shape[-2], w2, x.dtype)
    y = np.einsum("oh,...hwc->...owc", ah, x)
    return np.einsum("pw,...owc->...opc", aw, y)


def resize_bilinear(x, out_hw):
    """Differentiable bilinear resize of (B, H, W, C) tensors."""
    h2, w2 = out_hw
    ah = resize_matrix(x.data.shape[1], h2, x.data.dtype)
    aw = resize_matrix(x.data.shape[2], w2, x.data.dtype)
    y = np.einsum("oh,bhwc->bowc", ah, x.data)
    out = np.einsum("pw,bowc->bopc", aw, y)

    def vjp(g):
        t = np.einsum("pw,bopc->bowc", aw, g)
        return (np.einsum("oh,bowc->bhwc", ah, t),)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(f, x, eps=1e-5):
    """Max relative error between reverse-mode and central differences.

    Requires float64 inputs; f must map a Tensor to a scalar Tensor.
    """
    if x.data.dtype != np.float64:
        raise NumericsError("grad_check: requires float64 input")
    if not (1e-7 <= eps <= 1e-3):
        raise NumericsError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.shape != ():
        raise NumericsError(f"grad_check: f must be scalar-valued, got {out.data.shape}")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(leaf.data.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(leaf.data.copy())).data)
        flat[i] = orig
        fd = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# RNG


def _h64(*parts):
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-based splittable RNG over named streams.

    (seed, stream) fully determines the draw sequence; ``child(name)``
    derives an independent stream, so consumers can be reordered or run in
    parallel without perturbing each other. State is three integers and
    serializes exactly.
    """

    __slots__ = ("seed", "stream", "calls")

    def __init__(self, seed, stream=0, calls=0):
        self.seed = int(seed) & (2**64 - 1)
        self.stream = int(stream) & (2**64 - 1)
        self.calls = int(calls)

    def child(self, name):
        return Rng(self.seed, _h64("child", self.stream, name))

    def _generator(self):
        key = (self.seed << 64) | _h64("call", self.stream, self.calls)
        self.calls += 1
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, shape=None):
        g = self._generator()
        return g.random() if shape is None else g.random(shape)

    def normal(self, shape=None, std=1.0):
        g = self._generator()
        out = g.standard_normal() if shape is None else g.standard_normal(shape)
        return out * std

    def integers(self, low, high, shape=None):
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n):
        return self._generator().permutation(n)

    def choice(self, n, size, replace=False):
        return self._generator().choice(n, size=size, replace=replace)

    def bernoulli(self, p):
        return bool(self._generator().random() < p)

    def state(self):
        return {"seed": self.seed, "stream": self.stream, "calls": self.calls}

    @classmethod
    def from_state(cls, st):
        return cls(st["seed"], st["stream"], st["calls"])


# ---------------------------------------------------------------------------
# Parameters


class ParamStore:
    """Ordered name -> Tensor registry for trainable parameters."""

    def __init__(self):
        self._params = {}

    def add(self, name, array):
        if name in self._params:
            raise NumericsError(f"param '{name}' already registered")
        t = Tensor(np.ascontiguousarray(array), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def n_params(self):
        return sum(t.data.size for t in self._params.values())
