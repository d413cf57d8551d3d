"""Dense-tensor arithmetic with reverse-mode autodiff on a numpy substrate.

Conventions used throughout the package:

* A ``Tensor`` wraps one contiguous numpy float array. Training code runs in
  float32; verification paths build float64 tensors and reuse the same ops.
* Gradients are accumulated additively into ``.grad`` (a numpy array) by
  ``backward``; a tensor used twice in a graph receives both contributions.
* Ops record the graph only while grad mode is enabled (see ``no_grad``) and
  only for results that depend on some ``requires_grad`` tensor, so inference
  and data plumbing pay no tape overhead.
* Randomness comes exclusively from ``Rng``, a counter-based Philox generator
  with documented child-stream derivation. No global numpy seeding anywhere.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Rng",
    "Tensor",
    "tensor",
    "param",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "reshape",
    "swapaxes",
    "concat",
    "stack",
    "take_rows",
    "tsum",
    "tmean",
    "texp",
    "tlog",
    "tsqrt",
    "ttanh",
    "gelu",
    "clamp",
    "softmax_rows",
    "layer_norm",
    "finite_diff_check",
    "linear_init",
    "embedding_init",
]


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    """One round of splitmix64; used only to derive child stream ids."""
    z = (z + _SPLITMIX_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Counter-based random generator (numpy Philox 4x64).

    The generator is keyed by the pair ``(seed, stream)``; equal pairs produce
    identical draw sequences on every platform. Child generators are derived
    with ``child(i)``, which mixes ``(stream, i)`` through splitmix64 so that
    children of different indices (and grandchildren) never collide in
    practice. All draws go through float64 and are cast to the requested
    dtype, so the stream does not depend on the dtype asked for.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        )

    def child(self, index: int) -> "Rng":
        """Derive an independent generator for substream ``index`` >= 0."""
        mixed = _splitmix64((self.stream ^ _SPLITMIX_GAMMA) + index + 1)
        return Rng(self.seed, mixed)

    def normal(self, shape: Sequence[int] | int = (), dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape).astype(dtype)

    def uniform(self, low: float, high: float, shape: Sequence[int] | int = (), dtype=np.float32) -> np.ndarray:
        u = self._gen.random(size=shape)
        return (low + (high - low) * u).astype(dtype)

    def integers(self, low: int, high: int, size: Sequence[int] | int | None = None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def choice(self, seq: Sequence, ) -> object:
        return seq[int(self._gen.integers(0, len(seq)))]

    def get_state(self) -> dict:
        """JSON-serializable generator state (for resumable checkpoints)."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": np.asarray(st["state"]["counter"]).tolist(),
            "key": np.asarray(st["state"]["key"]).tolist(),
            "buffer": np.asarray(st["buffer"]).tolist(),
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        st = self._gen.bit_generator.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        self._gen.bit_generator.state = st


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording (inference / finite diffs)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense real array plus optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            # numpy returns scalars (not 0-d arrays) from reductions on 0-d
            # operands; wrap without losing their float precision.
            data = np.asarray(data)
            if data.dtype.kind != "f":
                data = data.astype(np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjps: tuple = ()

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return tpow(self, exponent)

    def __getitem__(self, key):
        return tslice(self, key)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def param(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=True)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Iterable[tuple]) -> Tensor:
    """Build a result tensor, recording vjps for grad-requiring parents."""
    recorded = [(p, vjp) for p, vjp in parents if _grad_enabled and p.requires_grad]
    out = Tensor(data, requires_grad=bool(recorded))
    if recorded:
        out._parents = tuple(p for p, _ in recorded)
        out._vjps = tuple(v for _, v in recorded)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root; accumulates into ``.grad``."""
    if root.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {tuple(root.shape)}")
    # Iterative post-order topological sort (graphs can be thousands deep).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _make(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    ])


def tpow(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = a.data ** e
    return _make(out, [(a, lambda g: g * e * a.data ** (e - 1.0))])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics; both operands ndim >= 2."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def grad_a(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        return _unbroadcast(ga, a.data.shape)

    def grad_b(g):
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(gb, b.data.shape)

    return _make(out, [(a, grad_a), (b, grad_b)])


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, [(a, lambda g: g.reshape(a.data.shape))])


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return _make(out, [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return _make(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        def vjp(g):
            return np.take(g, i, axis=axis)

        return vjp

    return _make(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def tslice(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, key, g)
        return acc

    return _make(out, [(a, vjp)])


def take_rows(weight: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D weight (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = weight.data[idx]

    def vjp(g):
        acc = np.zeros_like(weight.data)
        np.add.at(acc, idx, g)
        return acc

    return _make(out, [(weight, vjp)])


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=True)

    return _make(np.asarray(out), [(a, vjp)])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, _coerce(1.0 / n, a))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def tlog(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make(out, [(a, lambda g: g / a.data)])


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, [(a, lambda g: g * 0.5 / out)])


def ttanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))])


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth, so finite differences apply)."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)

    return _make(out, [(a, vjp)])


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)
    return _make(out, [(a, lambda g: g * inside)])


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (g - dot) * out

    return _make(out, [(x, vjp)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    d = x.data.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs at least 2 features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_x(g):
        dxhat = g * gain.data
        dvar = (dxhat * xc * -0.5 * inv ** 3).sum(axis=-1, keepdims=True)
        dmu = (-dxhat * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0 * xc).mean(axis=-1, keepdims=True)
        return dxhat * inv + dvar * 2.0 * xc / d + dmu / d

    def grad_gain(g):
        return _unbroadcast(g * xhat, gain.data.shape)

    def grad_bias(g):
        return _unbroadcast(g, bias.data.shape)

    return _make(out, [(x, grad_x), (gain, grad_gain), (bias, grad_bias)])


# ---------------------------------------------------------------------------
# Verification facility
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Compare analytic d f / d x against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    ``x`` should be float64; ``f`` must be a pure function of ``x`` (and of
    captured constants) returning a scalar tensor.
    """
    if not x.requires_grad:
        raise ValueError("finite_diff_check needs x.requires_grad = True")
    x.grad = None
    out = f(x)
    backward(out)
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------

def linear_init(rng: Rng, fan_in: int, fan_out: int, dtype=np.float32) -> tuple[Tensor, Tensor]:
    """Fan-in-scaled uniform init for a linear layer: U(-1/sqrt(n), 1/sqrt(n))."""
    bound = 1.0 / math.sqrt(fan_in)
    w = param(rng.uniform(-bound, bound, (fan_in, fan_out), dtype=dtype))
    b = param(rng.uniform(-bound, bound, (fan_out,), dtype=dtype))
    return w, b


def embedding_init(rng: Rng, rows: int, dim: int, dtype=np.float32) -> Tensor:
    """Embedding tables start at N(0, 0.02)."""
    return param((rng.normal((rows, dim), dtype=np.float64) * 0.02).astype(dtype))
