"""Minimal reverse-mode differentiation on top of numpy.

Every differentiable operation produces a :class:`Tensor` that remembers the
operation kind, its input tensors and whatever values the backward rule needs.
Backward rules live in the :data:`BACKWARD` registry keyed by operation kind,
so a rule can be inspected or swapped out (the gradient-check negative control
does exactly that).

Calling :func:`backward` on a scalar builds the recording of the computation
(a topologically ordered list of op nodes) and walks it in reverse, visiting
each op exactly once and accumulating gradients at fan-out points.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import (
    BatchSizeError,
    ConfigError,
    DimensionError,
    NumericError,
    VocabularyError,
)

LEAKY_SLOPE = 0.2

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (decoding, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "inputs", "saved", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op: Optional[str] = None
        self.inputs: tuple = ()
        self.saved: dict = {}
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def node_id(self) -> int:
        return id(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], **saved) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.inputs = tuple(inputs)
        out.saved = saved
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_pair(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


BACKWARD: Dict[str, Callable] = {}


def _rule(kind: str):
    def register(fn):
        BACKWARD[kind] = fn
        return fn

    return register


# ---------------------------------------------------------------- linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "add")
    return _result(a.data + b.data, "add", (a, b))


@_rule("add")
def _add_backward(out, g):
    a, b = out.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b))


@_rule("sub")
def _sub_backward(out, g):
    a, b = out.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b))


@_rule("mul")
def _mul_backward(out, g):
    a, b = out.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, "matmul", (a, b))


@_rule("matmul")
def _matmul_backward(out, g):
    a, b = out.inputs
    A, B = a.data, b.data
    if A.ndim == 2 and B.ndim == 2:
        return g @ B.T, A.T @ g
    if A.ndim == 2:  # matrix @ vector
        return np.outer(g, B), A.T @ g
    if B.ndim == 2:  # vector @ matrix
        return B @ g, np.outer(A, g)
    return g * B, g * A


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result(a.data.T, "transpose", (a,))


@_rule("transpose")
def _transpose_backward(out, g):
    return (g.T,)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(data, "reshape", (a,))


@_rule("reshape")
def _reshape_backward(out, g):
    return (g.reshape(out.inputs[0].shape),)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    return _result(a.data[index], "getitem", (a,), index=index)


@_rule("getitem")
def _getitem_backward(out, g):
    a = out.inputs[0]
    full = np.zeros_like(a.data)
    np.add.at(full, out.saved["index"], g)
    return (full,)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _result(data, "concat", tensors, axis=axis, sizes=sizes)


@_rule("concat")
def _concat_backward(out, g):
    cuts = np.cumsum(out.saved["sizes"])[:-1]
    return tuple(np.split(g, cuts, axis=out.saved["axis"]))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), axis=axis, keepdims=keepdims)


@_rule("sum")
def _sum_backward(out, g):
    a = out.inputs[0]
    axis = out.saved["axis"]
    if axis is not None and not out.saved["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def mean_rows(a) -> Tensor:
    """Mean over the first axis: (n, D) -> (D,)."""
    a = as_tensor(a)
    if a.ndim < 1 or a.shape[0] == 0:
        raise DimensionError(f"mean_rows: need at least one row, got shape {a.shape}")
    return _result(a.data.mean(axis=0), "mean_rows", (a,))


@_rule("mean_rows")
def _mean_rows_backward(out, g):
    a = out.inputs[0]
    return (np.broadcast_to(g / a.shape[0], a.shape).copy(),)


def segment_mean(a, segments: np.ndarray, count: int) -> Tensor:
    """Mean of the rows of ``a`` grouped by integer segment id -> (count, D)."""
    a = as_tensor(a)
    segments = np.asarray(segments)
    sizes = np.bincount(segments, minlength=count).astype(a.data.dtype)
    if np.any(sizes == 0):
        raise DimensionError("segment_mean: empty segment")
    totals = np.zeros((count,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(totals, segments, a.data)
    return _result(totals / sizes[:, None], "segment_mean", (a,), segments=segments, sizes=sizes)


@_rule("segment_mean")
def _segment_mean_backward(out, g):
    seg, sizes = out.saved["segments"], out.saved["sizes"]
    return ((g / sizes[:, None])[seg],)


# ------------------------------------------------------------------ activations


def tanh(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.tanh(x.data), "tanh", (x,))


@_rule("tanh")
def _tanh_backward(out, g):
    return (g * (1.0 - out.data * out.data),)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y.astype(d.dtype, copy=False), "sigmoid", (x,))


@_rule("sigmoid")
def _sigmoid_backward(out, g):
    return (g * out.data * (1.0 - out.data),)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    return _result(np.where(x.data > 0, x.data, slope * x.data), "leaky_relu", (x,), slope=slope)


@_rule("leaky_relu")
def _leaky_relu_backward(out, g):
    x = out.inputs[0].data
    return (g * np.where(x > 0, 1.0, out.saved["slope"]),)


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.exp(x.data), "exp", (x,))


@_rule("exp")
def _exp_backward(out, g):
    return (g * out.data,)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), "log", (x,))


@_rule("log")
def _log_backward(out, g):
    return (g / out.inputs[0].data,)


# -------------------------------------------------------------------- softmax


def _masked_softmax_np(d: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        z = d - d.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    big = np.where(mask, d, -np.inf)
    z = big - big.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along the last axis, max-shifted for stability.

    With ``mask`` (boolean, same shape), entries outside the mask get exactly
    zero probability; every row must keep at least one entry.
    """
    x = as_tensor(x)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask shape {mask.shape} does not match {x.shape}")
        if not mask.any(axis=-1).all():
            raise DimensionError("softmax_rows: a row has an empty mask")
    return _result(_masked_softmax_np(x.data, mask), "softmax", (x,))


@_rule("softmax")
def _softmax_backward(out, g):
    y = out.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return _result(z - lse, "log_softmax", (x,))


@_rule("log_softmax")
def _log_softmax_backward(out, g):
    p = np.exp(out.data)
    return (g - p * g.sum(axis=-1, keepdims=True),)


# ------------------------------------------------------------------ embeddings


def embedding_lookup(table, index) -> Tensor:
    """Select rows of a (rows x D) table; ``index`` is an int or an int array."""
    table = as_tensor(table)
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise VocabularyError(f"embedding index must be integral, got {idx.dtype}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)].reshape(-1)[0]
        raise VocabularyError(f"index {int(bad)} out of range for table with {n} rows")
    return _result(table.data[idx], "embedding", (table,), index=idx)


@_rule("embedding")
def _embedding_backward(out, g):
    table = out.inputs[0]
    full = np.zeros_like(table.data)
    np.add.at(full, out.saved["index"], g)
    return (full,)


# ---------------------------------------------------------------- regularizers


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) during training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.data.dtype) / (1.0 - rate)
    return _result(x.data * mask, "dropout", (x,), mask=mask)


@_rule("dropout")
def _dropout_backward(out, g):
    return (g * out.saved["mask"],)


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one feature width."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, width: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            gamma=Tensor(np.ones(width, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(width, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(width, dtype=dtype),
            running_var=np.ones(width, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def standardize(x, eps: float = 1e-5) -> Tensor:
    """Per-feature standardization of a (batch x D) matrix with batch statistics."""
    x = as_tensor(x)
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    return _result(xhat, "standardize", (x,), inv_std=inv_std)


@_rule("standardize")
def _standardize_backward(out, g):
    xhat, inv_std = out.data, out.saved["inv_std"]
    n = xhat.shape[0]
    dx = (inv_std / n) * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))
    return (dx,)


def batch_norm(x, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over the rows of a (batch x D) matrix.

    Training mode normalizes with the batch mean and (biased) variance and
    moves the running statistics towards them; eval mode uses the running
    statistics only and is therefore deterministic.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"batch_norm: expected (batch, D), got {x.shape}")
    if training:
        if x.shape[0] < 2:
            raise BatchSizeError(f"batch_norm needs a batch of at least 2 in training mode, got {x.shape[0]}")
        xhat = standardize(x, state.eps)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * x.data.mean(axis=0)
        state.running_var = (1 - m) * state.running_var + m * x.data.var(axis=0)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = mul(sub(x, state.running_mean), inv_std)
    return add(mul(xhat, state.gamma), state.beta)


# --------------------------------------------------------------------- backward


def recording(loss: Tensor) -> List[Tensor]:
    """Op nodes reachable from ``loss`` in topological order (inputs first)."""
    order: List[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return [n for n in order if n.op is not None]


class GradMap(dict):
    """Gradients keyed by tensor; tensors the loss never touched get zeros."""

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        key = id(tensor)
        if dict.__contains__(self, key):
            return dict.__getitem__(self, key)
        return np.zeros_like(tensor.data)

    def __contains__(self, tensor) -> bool:
        return dict.__contains__(self, id(tensor))


def backward(loss: Tensor) -> GradMap:
    """Reverse pass from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their gradient added into ``.grad``.
    Returns a :class:`GradMap` holding the gradient of every leaf reached.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss.requires_grad and loss.op is None:
        leaves[id(loss)] = loss
    for node in reversed(recording(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = BACKWARD[node.op](node, g)
        for parent, pg in zip(node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
            if parent.op is None:
                leaves[key] = parent
    out = GradMap()
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        dict.__setitem__(out, key, g)
    return out


# ------------------------------------------------------------ gradient checking


@dataclass
class GradientReport:
    per_param: Dict[str, float]
    eps: float
    coords_checked: Dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def worst(self) -> Optional[str]:
        if not self.per_param:
            return None
        return max(self.per_param, key=self.per_param.get)


def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_difference_check(
    f: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> GradientReport:
    """Compare analytic gradients of ``f(params)`` with central differences.

    ``f`` must be deterministic: stochastic ops have to draw from a generator
    reseeded on every call. At most ``max_coords`` coordinates per tensor are
    probed, chosen with a generator seeded by ``seed``.
    """
    if not eps > 0:
        raise ConfigError(f"finite-difference step must be positive, got {eps}")
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ConfigError(f"gradient check needs 64-bit tensors; {name} is {p.data.dtype}")
    for p in params.values():
        p.grad = None
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite at the check point")
    grads = backward(loss)
    rng = np.random.default_rng(seed)
    per_param, counts = {}, {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
            analytic = grads[p].reshape(-1)[coords]
            numeric = np.empty(len(coords))
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(params).item()
                flat[i] = orig - eps
                lo = f(params).item()
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NumericError(f"objective is not finite when perturbing {name}[{i}]")
                numeric[k] = (hi - lo) / (2 * eps)
            per_param[name] = float(relative_error(analytic, numeric).max()) if len(coords) else 0.0
            counts[name] = len(coords)
    return GradientReport(per_param=per_param, eps=eps, coords_checked=counts)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
