"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure mapping the output
gradient to input gradients. :func:`grad` walks the recorded graph once in
reverse topological order.

Broadcasting is deliberately narrow: elementwise binary ops accept either
equal shapes or one operand with a single element. Anything else needs an
explicit reshape.
"""

from contextlib import contextmanager
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .errors import ContractError, DimensionError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional array that optionally tracks gradients.

    Treat instances as immutable values. The one sanctioned exception is an
    optimizer updating the ``data`` of leaf parameters between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    # -- method aliases ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        leaves = [n for n in _topo_order(self) if n._backward is None]
        for leaf, g in zip(leaves, grad(self, leaves)):
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> List[Tensor]:
    """Post-order of nodes reachable from ``root`` that require gradients."""
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(loss: Tensor, leaves: Iterable[Tensor]) -> List[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``leaves``.

    Leaves the loss does not depend on receive zero arrays.
    """
    leaves = list(leaves)
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaf_grads = {}
    if loss.requires_grad:
        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo_order(loss)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaf_grads[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
    return [leaf_grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in leaves]


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if b.size == 1 and b.ndim <= a.ndim:
        return a.shape
    if a.size == 1 and a.ndim <= b.ndim:
        return b.shape
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only single-element broadcasting is allowed)")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
                       "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        gb = -g * out / b.data
        return _reduce_to(g / b.data, a.shape), _reduce_to(gb, b.shape)

    return make_result(out, (a, b), backward, "div")


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("power takes a constant exponent")
    p = float(exponent)
    return make_result(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select slices of ``x`` along ``axis`` by an integer index array of any shape.

    The backward pass scatters into gathered positions only; everything else
    receives exactly zero.
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather indices must be integers")
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"gather index out of range for axis of size {n}")
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        # scatter-add as a sparse one-hot product: rows of x by gathered positions
        g_front = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        g_flat = g_front.reshape(idx.size, -1)
        scatter = sparse.csr_matrix(
            (np.ones(idx.size, dtype=g.dtype), (idx.reshape(-1), np.arange(idx.size))), shape=(n, idx.size)
        )
        rest = tuple(np.delete(np.array(x.shape), axis))
        gx_front = np.asarray(scatter @ g_flat).reshape((n,) + rest)
        return (np.ascontiguousarray(np.moveaxis(gx_front, 0, axis)).astype(x.dtype, copy=False),)

    return make_result(out, (x,), backward, "gather")


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return make_result(np.array(out), (x,), backward, "index")


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} vs {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out.reshape(lead + (weight.shape[1],)), parents, backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs features {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def avgpool(x: Tensor, window: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Non-overlapping mean pooling of ``axes`` by ``window``; dims must divide exactly."""
    window = tuple(int(w) for w in window)
    axes = tuple(a % x.ndim for a in axes)
    if len(window) != len(axes):
        raise ContractError("avgpool: window and axes lengths differ")
    if any(w <= 0 for w in window):
        raise DimensionError(f"avgpool: non-positive window {window}")
    order = sorted(zip(axes, window))
    split_shape = []
    inner_axes = []
    pooled = dict(order)
    for ax, dim in enumerate(x.shape):
        if ax in pooled:
            w = pooled[ax]
            if dim % w:
                raise DimensionError(f"avgpool: axis {ax} of size {dim} not divisible by window {w}")
            split_shape.extend([dim // w, w])
            inner_axes.append(len(split_shape) - 1)
        else:
            split_shape.append(dim)
    count = int(np.prod(window))
    out = x.data.reshape(split_shape).mean(axis=tuple(inner_axes))

    def backward(g):
        g_split = np.expand_dims(g, tuple(inner_axes)) / count
        return (np.broadcast_to(g_split, split_shape).reshape(x.shape).copy(),)

    return make_result(out, (x,), backward, "avgpool")


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (align-corners) mapping n_in samples to n_out."""
    if n_in <= 0 or n_out <= 0:
        raise DimensionError(f"interpolation sizes must be positive, got {n_in} -> {n_out}")
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def _apply_along(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, arr, axes=([1], [axis])), 0, axis)


def resample3d(x: Tensor, target_shape: Sequence[int], axes: Sequence[int] = (-3, -2, -1)) -> Tensor:
    """Trilinear (align-corners) resampling of three axes to ``target_shape``."""
    target_shape = tuple(int(s) for s in target_shape)
    axes = tuple(a % x.ndim for a in axes)
    if len(target_shape) != 3 or len(axes) != 3:
        raise DimensionError("resample3d resamples exactly three axes")
    if any(s <= 0 for s in target_shape):
        raise DimensionError(f"resample3d: non-positive target {target_shape}")
    mats = [interp_matrix(x.shape[a], n, dtype=x.dtype) for a, n in zip(axes, target_shape)]
    out = x.data
    for a, m in zip(axes, mats):
        if m.shape[0] != m.shape[1] or not np.array_equal(m, np.eye(m.shape[0])):
            out = _apply_along(out, m, a)

    def backward(g):
        for a, m in zip(axes, mats):
            if m.shape[0] != m.shape[1] or not np.array_equal(m, np.eye(m.shape[0])):
                g = _apply_along(g, m.T, a)
        return (g,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "resample3d")
