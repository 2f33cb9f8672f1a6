"""Reverse-mode automatic differentiation over float64 numpy arrays.

The compute graph is built implicitly: every operation that touches a tensor
with ``requires_grad=True`` records its parents and a backward closure.
Elementwise broadcasting is deliberately restricted to a single leading batch
axis (one operand's shape must be a suffix of the other's); anything else is
a shape error.  All results are checked for finiteness: NaN/Inf propagation
is treated as a bug, not a value.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class AutodiffError(Exception):
    """Base class for numerics-core failures."""


class ShapeMismatchError(AutodiffError):
    def __init__(self, op: str, shape_a, shape_b, detail: str = ""):
        msg = f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError):
    def __init__(self, op: str, where=None):
        msg = f"{op}: produced non-finite values"
        if where is not None:
            msg += f" (first at flat index {where})"
        super().__init__(msg)


class GraphError(AutodiffError):
    pass


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_finite(op: str, data: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(data)))[0])
        raise NonFiniteError(op, bad)
    return data


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode grads."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    # -- graph construction ------------------------------------------------

    def backward(self) -> dict["Tensor", "Tensor"]:
        return backward(self)

    # operator sugar; scalars route through the dedicated scalar ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _make_node(op: str, data: np.ndarray, parents: Sequence[Tensor],
               backward: Callable[[np.ndarray], None] | None) -> Tensor:
    """Wrap an op result.  The graph records the op only when some parent
    requires a gradient; otherwise the result is a plain constant tensor.

    Exposed for modules that define their own differentiable primitives.
    """
    _check_finite(op, data)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes introduced by broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _elementwise_shapes(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.ndim > b.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return a.shape
    if b.ndim > a.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return b.shape
    raise ShapeMismatchError(op, a.shape, b.shape,
                             "broadcast allowed on leading batch axes only")


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shapes("add", a, b)
    out_data = a.data + b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(g, b.shape))

    return _make_node("add", out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shapes("sub", a, b)
    out_data = a.data - b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(-g, b.shape))

    return _make_node("sub", out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shapes("mul", a, b)
    out_data = a.data * b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(g * a.data, b.shape))

    return _make_node("mul", out_data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_to_shape(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(-g * a.data / (b.data * b.data),
                                            b.shape))

    return _make_node("div", out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g: np.ndarray) -> None:
        _accumulate(a, -g)

    return _make_node("neg", -a.data, (a,), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * s)

    return _make_node("scale", a.data * s, (a,), bw)


def shift(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g)

    return _make_node("shift", a.data + s, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g: np.ndarray) -> None:
        _accumulate(a, 2.0 * a.data * g)

    return _make_node("square", a.data * a.data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g / (2.0 * out_data))

    return _make_node("sqrt", out_data, (a,), bw)


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * out_data)

    return _make_node("exp", out_data, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def bw(g: np.ndarray) -> None:
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accumulate(a, g * (cdf + x * pdf))

    return _make_node("gelu", out_data, (a,), bw)


# -- linear algebra / structure --------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape,
                                 "operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape,
                                 "inner dimensions differ")
    if a.ndim != b.ndim and min(a.ndim, b.ndim) != 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape,
                                 "batch broadcast only against a rank-2 operand")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape,
                                 "batch axes must match exactly")
    out_data = a.data @ b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _reduce_to_shape(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _reduce_to_shape(gb, b.shape))

    return _make_node("matmul", out_data, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ShapeMismatchError("transpose", a.shape, a.shape,
                                     "needs rank >= 2")
        perm = list(range(a.ndim))
        perm[-1], perm[-2] = perm[-2], perm[-1]
    else:
        perm = list(axes)
    inv = np.argsort(perm)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, np.transpose(g, inv))

    return _make_node("transpose", np.transpose(a.data, perm), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _make_node("reshape", out_data, (a,), bw)


def tslice(a: Tensor, key) -> Tensor:
    out_data = a.data[key]
    if isinstance(out_data, np.ndarray):
        out_data = out_data.copy()
    else:
        out_data = np.asarray(out_data, dtype=np.float64)

    def bw(g: np.ndarray) -> None:
        gp = np.zeros_like(a.data)
        gp[key] = g
        _accumulate(a, gp)

    return _make_node("slice", out_data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise GraphError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        sa = list(ref)
        sb = list(t.shape)
        if len(sa) != len(sb):
            raise ShapeMismatchError("concat", ref, t.shape)
        sa[axis] = sb[axis] = -1
        if sa != sb:
            raise ShapeMismatchError("concat", ref, t.shape,
                                     f"mismatch off axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                _accumulate(t, g[tuple(idx)])

    return _make_node("concat", out_data, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shp = list(t.shape)
        shp.insert(axis if axis >= 0 else len(shp) + 1 + axis, 1)
        expanded.append(reshape(t, shp))
    return concat(expanded, axis=axis)


def tile_axis(a: Tensor, axis: int, reps: int) -> Tensor:
    """Repeat an existing size-1 axis.  The explicit stand-in for the
    broadcasting the elementwise ops refuse to do silently."""
    if a.shape[axis] != 1:
        raise ShapeMismatchError("tile_axis", a.shape, (reps,),
                                 f"axis {axis} must have size 1")
    reps_vec = [1] * a.ndim
    reps_vec[axis] = reps
    out_data = np.tile(a.data, reps_vec)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g.sum(axis=axis, keepdims=True))

    return _make_node("tile_axis", out_data, (a,), bw)


# -- reductions and activations ---------------------------------------------

def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axes)

    def bw(g: np.ndarray) -> None:
        shape = list(a.shape)
        for ax in axes:
            shape[ax] = 1
        _accumulate(a, np.broadcast_to(g.reshape(shape), a.shape).copy())

    return _make_node("sum", out_data, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes)

    def bw(g: np.ndarray) -> None:
        shape = list(a.shape)
        for ax in axes:
            shape[ax] = 1
        _accumulate(a, np.broadcast_to(g.reshape(shape), a.shape) / count)

    return _make_node("mean", out_data, (a,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size
    with np.errstate(over="ignore"):
        out_data = np.asarray((diff * diff).sum() / n)

    def bw(g: np.ndarray) -> None:
        coeff = 2.0 * g / n
        if a.requires_grad:
            _accumulate(a, coeff * diff)
        if b.requires_grad:
            _accumulate(b, -coeff * diff)

    return _make_node("mse", out_data, (a, b), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make_node("softmax", out_data, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = xc * inv

    def bw(g: np.ndarray) -> None:
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out_data).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - out_data * gy))

    return _make_node("layer_norm", out_data, (a,), bw)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Classic transformer timestep embedding; returns a plain array since
    gradients never flow into the integer timestep."""
    if dim % 2 != 0:
        raise GraphError("sinusoidal_embedding dim must be even")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


# -- graph traversal ---------------------------------------------------------

class ComputeGraph:
    """Topologically ordered view of every node reachable from a root."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order  # parents precede children

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.op == "leaf" and n.requires_grad]


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Run reverse-mode accumulation from a scalar loss.

    Returns a map from every reachable parameter leaf to its gradient; the
    same gradients are also left on each leaf's ``.grad``.
    """
    if loss.size != 1:
        raise GraphError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    graph = ComputeGraph(loss)
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    out: dict[Tensor, Tensor] = {}
    for leaf in graph.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        out[leaf] = Tensor(leaf.grad)
    return out


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               n_samples: int = 50, h: float = 1e-5,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be deterministic and close over ``params``.  Returns the max
    over sampled coordinates of |analytic - numeric| / max(1e-8, |analytic| +
    |numeric|).
    """
    params = list(params)
    rng = rng or np.random.default_rng(0)
    loss = f()
    gmap = backward(loss)
    worst = 0.0
    for p in params:
        analytic = gmap.get(p)
        if analytic is None:
            analytic_data = np.zeros_like(p.data)
        else:
            analytic_data = analytic.data
        flat = p.data.reshape(-1)
        n_coords = min(n_samples, flat.size)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(f().data)
            flat[c] = orig - h
            f_minus = float(f().data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic_data.reshape(-1)[c])
            if not (math.isfinite(a) and math.isfinite(numeric)):
                raise NonFiniteError("grad_check", int(c))
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
