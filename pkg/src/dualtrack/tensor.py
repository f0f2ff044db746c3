"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every model computation runs through the ops in this module so that
gradients, determinism, and FLOP instrumentation live in one place.
Storage is row-major contiguous float64 throughout; ops allocate fresh
outputs (no aliasing views escape). Gradients flow over whole tensors,
never per scalar.

Thread model: a graph is private to the thread that builds it. Distinct
graphs (e.g. concurrent inference over shared, read-only parameters) may
run on concurrent threads; grad mode and FLOP counters are thread-local.
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "Tensor", "Parameter", "ShapeError", "ConfigError", "no_grad",
    "FlopCounter", "set_debug_checks", "matmul", "softmax", "layer_norm",
    "linear", "activation", "relu", "gelu", "sigmoid", "bce_with_logits",
    "minimum", "maximum", "concat", "reshape", "transpose", "roll2d",
    "take_last", "select_rows", "narrow", "trunc_normal",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ConfigError(ValueError):
    """A model or run configuration value is invalid."""


_state = threading.local()

# Additive score offset used to mask attention pairs. exp(-1e9 - max)
# underflows to exactly 0.0 in float64, so masked weights are exactly zero
# while stored values stay finite (construction rejects NaN/Inf).
MASK_FILL = -1e9

_DEBUG_CHECKS = False


def set_debug_checks(flag: bool) -> None:
    """Enable finiteness checks on every op output (slow, for debugging)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops inside do not record the tape."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class FlopCounter:
    """Counts floating-point ops of matmuls executed inside the context.

    Convention: one multiply-accumulate = 2 FLOPs; only matrix products are
    counted (softmax, layer norm, bias adds are ignored), matching the
    closed-form cost model.
    """

    def __init__(self):
        self.flops = 0

    def __enter__(self):
        stack = getattr(_state, "counters", None)
        if stack is None:
            stack = []
            _state.counters = stack
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.counters.remove(self)
        return False


def _count_flops(n: int) -> None:
    stack = getattr(_state, "counters", None)
    if stack:
        for c in stack:
            c.flops += n


class Tensor:
    """A float64 array plus the tape hooks needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (got NaN/Inf)")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return tabs(self)

    # -- reverse mode ------------------------------------------------------

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar.

        Populates/accumulates .grad on every reachable Parameter (leaves
        with requires_grad). The graph is freed afterwards; a second
        backward needs a fresh forward pass.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            bw = node._backward
            if bw is not None and node.grad is not None:
                bw(node.grad)
            if node._parents and not node.requires_grad:
                node.grad = None  # free intermediate storage eagerly
            node._parents = ()
            node._backward = None


class Parameter(Tensor):
    """Named trainable leaf. Gradient starts at zero so an unreachable
    parameter reports grad 0 after backward, not None."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = str(name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents) or t._backward is not None


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if _grad_enabled() and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("op produced non-finite values")
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not _needs_grad(t):
        return
    if t.grad is None:
        t.grad = np.ascontiguousarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; at ties the gradient routes to the first operand."""
    a, b = _coerce(a), _coerce(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(g * pick_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~pick_a, b.data.shape))

    return _make(out, (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient routes to the first operand."""
    a, b = _coerce(a), _coerce(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(g * pick_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~pick_a, b.data.shape))

    return _make(out, (a, b), bw)


def tabs(x) -> Tensor:
    x = _coerce(x)
    out = np.abs(x.data)
    sign = np.sign(x.data)  # subgradient 0 at the kink

    def bw(g):
        _accum(x, g * sign)

    return _make(out, (x,), bw)


# -- matrix product -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product for rank 2..3 operands.

    Supported: (m,k)@(k,n), (B,m,k)@(B,k,n) with equal batch, and
    (B,m,k)@(k,n). Counts 2*m*k*n FLOPs per batch element.
    """
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim not in (2, 3):
        raise ShapeError(f"matmul supports rank 2..3 operands, got {ad.shape} @ {bd.shape}")
    if ad.ndim == 2 and bd.ndim == 3:
        raise ShapeError(f"matmul does not broadcast a rank-2 lhs over a batched rhs: {ad.shape} @ {bd.shape}")
    inner = bd.shape[0] if bd.ndim == 2 else bd.shape[1]
    if ad.shape[-1] != inner:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul batch dimensions disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd
    batch = ad.shape[0] if ad.ndim == 3 else 1
    _count_flops(2 * batch * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def bw(g):
        if _needs_grad(a):
            if bd.ndim == 2:
                _accum(a, g @ bd.T)
            else:
                _accum(a, g @ np.swapaxes(bd, -1, -2))
        if _needs_grad(b):
            if bd.ndim == 2:
                if ad.ndim == 2:
                    _accum(b, ad.T @ g)
                else:
                    _accum(b, np.tensordot(ad, g, axes=([0, 1], [0, 1])))
            else:
                _accum(b, np.swapaxes(ad, -1, -2) @ g)

    return _make(out, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: x @ w + b."""
    x, w = _coerce(x), _coerce(w)
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be rank 2, got {w.data.shape}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear input width {x.data.shape[-1]} does not match weight {w.data.shape}")
    out = matmul(x, w)
    if b is not None:
        b = _coerce(b)
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"linear bias shape {b.data.shape} does not match weight {w.data.shape}")
        out = add(out, b)
    return out


# -- nonlinearities -----------------------------------------------------------


def relu(x) -> Tensor:
    x = _coerce(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _make(out, (x,), bw)


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    """Gaussian error linear unit, tanh approximation:
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = _coerce(x)
    xd = x.data
    u = _GELU_K * (xd + _GELU_A * xd ** 3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_A * xd ** 2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return _make(out, (x,), bw)


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation kind: {kind!r}")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    out = _sigmoid_np(x.data)

    def bw(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), bw)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross entropy on raw logits (numerically stable):
    max(x,0) - x*t + log1p(exp(-|x|)). Targets are constants."""
    x = _coerce(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != x.data.shape:
        raise ShapeError(f"bce targets shape {t.shape} does not match logits {x.data.shape}")
    xd = x.data
    out = np.maximum(xd, 0.0) - xd * t + np.log1p(np.exp(-np.abs(xd)))

    def bw(g):
        _accum(x, g * (_sigmoid_np(xd) - t))

    return _make(out, (x,), bw)


# -- reductions ---------------------------------------------------------------


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(np.asarray(out), (x,), bw)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]
    s = tsum(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along an axis with max-subtraction stabilization."""
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        tmp = g * out
        _accum(x, tmp - out * tmp.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis: gamma * (x - mu)/sqrt(var + eps) + beta."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,):
        raise ShapeError(f"layer_norm gamma shape {gamma.data.shape} does not match feature dim {d}")
    if beta.data.shape != (d,):
        raise ShapeError(f"layer_norm beta shape {beta.data.shape} does not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.data.ndim - 1))

    def bw(g):
        if _needs_grad(gamma):
            _accum(gamma, (g * xhat).sum(axis=lead))
        if _needs_grad(beta):
            _accum(beta, g.sum(axis=lead))
        if _needs_grad(x):
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv)

    return _make(out, (x, gamma, beta), bw)


# -- shape plumbing -----------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.data.shape} into {shape}")
    out = np.ascontiguousarray(x.data).reshape(shape)
    orig = x.data.shape

    def bw(g):
        _accum(x, g.reshape(orig))

    return _make(out, (x,), bw)


def transpose(x, axes) -> Tensor:
    x = _coerce(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {x.data.ndim}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def bw(g):
        _accum(x, g.transpose(inv))

    return _make(out, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out, tuple(tensors), bw)


def roll2d(x, dy: int, dx: int) -> Tensor:
    """Cyclic shift over the first two axes (token rows/cols)."""
    x = _coerce(x)
    if x.data.ndim < 2:
        raise ShapeError(f"roll2d requires rank >= 2, got {x.data.shape}")
    out = np.roll(x.data, (dy, dx), axis=(0, 1))

    def bw(g):
        _accum(x, np.roll(g, (-dy, -dx), axis=(0, 1)))

    return _make(out, (x,), bw)


def take_last(x, index) -> Tensor:
    """Gather along the last axis with an integer index array.

    x (..., K), index any integer shape I -> out (..., *I). Backward
    scatter-adds into the table (duplicate indices accumulate).
    """
    x = _coerce(x)
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take_last index must be integer")
    out = x.data[..., idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        flat_idx = idx.reshape(-1)
        gflat = g.reshape(x.data.shape[:-1] + (flat_idx.size,))
        np.add.at(gx, (..., flat_idx), gflat)
        _accum(x, gx)

    return _make(out, (x,), bw)


def select_rows(x, index) -> Tensor:
    """Pick rows of a rank-2 tensor; backward scatters into place."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeError(f"select_rows requires rank 2, got {x.data.shape}")
    idx = np.asarray(index, dtype=np.int64)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _make(out, (x,), bw)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = _coerce(x)
    if not (0 <= start and start + length <= x.data.shape[axis]):
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of bounds for axis {axis} of {x.data.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = np.ascontiguousarray(x.data[sl])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum(x, gx)

    return _make(out, (x,), bw)


# -- init ---------------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) clipped to +-2 std; the standard transformer init."""
    vals = rng.standard_normal(shape) * std
    np.clip(vals, -2.0 * std, 2.0 * std, out=vals)
    return vals


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1
_VERSION_KEY = "__checkpoint_version__"


def save_checkpoint(path, params) -> None:
    """Write a flat name -> array archive (.npz: shape + little-endian
    float64 payload per entry) plus a version tag. Bit-exact round trip."""
    arrays = {}
    for name, p in params.items():
        if name.startswith("__"):
            raise ValueError(f"parameter name {name!r} collides with archive metadata")
        data = p.data if isinstance(p, Tensor) else np.asarray(p)
        arrays[name] = np.ascontiguousarray(data, dtype="<f8")
    arrays[_VERSION_KEY] = np.array([CHECKPOINT_VERSION], dtype="<f8")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    """Read an archive written by save_checkpoint; returns name -> ndarray."""
    with np.load(path) as npz:
        if _VERSION_KEY not in npz.files:
            raise ValueError(f"{path}: not a checkpoint (missing version tag)")
        version = int(npz[_VERSION_KEY][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return {name: np.asarray(npz[name], dtype="<f8")
                for name in npz.files if name != _VERSION_KEY}
