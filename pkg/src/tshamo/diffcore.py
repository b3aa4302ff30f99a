"""Small reverse-mode autodiff over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` (entered as a context
manager) whenever at least one operand has ``requires_grad`` set.  Outside a
tape nothing is recorded, which is how inference runs.

Broadcasting is deliberately narrow: elementwise binaries accept equal
shapes, a scalar operand, or an operand whose shape is a trailing suffix of
the other's (the bias case).  Anything else must be reshaped explicitly.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "TapeError",
    "apply_primitive", "backward", "PRIMITIVES",
    "matmul", "add", "subtract", "multiply", "scale", "sum", "mean", "concat",
    "slice_", "reshape", "transpose", "gelu", "tanh", "softmax", "layer_norm",
    "embedding", "squared_error", "cross_entropy",
    "AdamState", "adam_init", "adam_step",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape", "__weakref__")
    # make ndarray (op) Tensor defer to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    ctx: object


class Tape:
    """Append-only record of primitive applications.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum(multiply(x, x))
    >>> tape.backward(y)[x].data
    array([2., 4.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._done = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def reset(self) -> None:
        self.nodes.clear()
        self._done = False

    def record(self, op: str, inputs: tuple, output: Tensor, ctx) -> None:
        if self._done:
            raise TapeError("tape already consumed by backward(); call reset() first")
        output._tape = self
        self.nodes.append(_Node(op, inputs, output, ctx))

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise TapeError("backward() already called on this tape; reset() before reuse")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self._done = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            needs = tuple(isinstance(t, Tensor) and t.requires_grad for t in node.inputs)
            in_grads = PRIMITIVES[node.op].backward(g, node.ctx, needs)
            for inp, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = inp
        return {owners[k]: _wrap(np.asarray(v)) for k, v in grads.items()}


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Backpropagate from ``loss`` through the tape that produced it."""
    if loss._tape is None:
        raise TapeError("loss is not connected to any tape")
    return loss._tape.backward(loss)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable   # (arrays, **attrs) -> (out, ctx)
    backward: Callable  # (grad, ctx, needs) -> tuple of arrays or None


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, fwd: Callable, bwd: Callable) -> None:
    PRIMITIVES[name] = Primitive(name, fwd, bwd)


def _wrap(arr: np.ndarray, requires_grad: bool = False) -> Tensor:
    """Tensor around an array already known to be finite float64."""
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.name = None
    out._tape = None
    out.requires_grad = requires_grad
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_primitive(op: str, operands: Sequence, **attrs) -> Tensor:
    prim = PRIMITIVES.get(op)
    if prim is None:
        raise KeyError(f"unknown primitive {op!r}")
    tensors = tuple(_as_tensor(t) for t in operands)
    out_data, ctx = prim.forward(tuple(t.data for t in tensors), **attrs)
    # any NaN/Inf poisons the sum, and one reduction is cheaper than isfinite()
    if not np.isfinite(np.add.reduce(out_data, axis=None)):
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise NonFiniteError(f"{op} produced non-finite output (operand shapes {shapes})")
    out = _wrap(out_data, any(t.requires_grad for t in tensors))
    stack = _tape_stack()
    if out.requires_grad and stack:
        stack[-1].record(op, tensors, out, ctx)
    return out


def _fail(op: str, *shapes, why: str = "incompatible shapes") -> ShapeError:
    return ShapeError(f"{op}: {why}: " + " vs ".join(str(tuple(s)) for s in shapes))


# ---------------------------------------------------------------- elementwise

def _is_scalar(shape: tuple) -> bool:
    return shape == () or shape == (1,)


def _binary_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if _is_scalar(sb):
        return sa
    if _is_scalar(sa):
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise _fail(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar(shape):
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _add_fwd(xs):
    a, b = xs
    _binary_shape("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(g, ctx, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None)


def _sub_fwd(xs):
    a, b = xs
    _binary_shape("subtract", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(g, ctx, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            -_unbroadcast(g, sb) if needs[1] else None)


def _mul_fwd(xs):
    a, b = xs
    _binary_shape("multiply", a, b)
    return a * b, (a, b)


def _mul_bwd(g, ctx, needs):
    a, b = ctx
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _scale_fwd(xs, factor: float):
    return xs[0] * factor, factor


def _scale_bwd(g, factor, needs):
    return (g * factor,)


_register("add", _add_fwd, _add_bwd)
_register("subtract", _sub_fwd, _sub_bwd)
_register("multiply", _mul_fwd, _mul_bwd)
_register("scale", _scale_fwd, _scale_bwd)


# ---------------------------------------------------------------- matmul

def _matmul_fwd(xs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2:
        raise _fail("matmul", a.shape, b.shape, why="operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise _fail("matmul", a.shape, b.shape, why="inner dimensions differ")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise _fail("matmul", a.shape, b.shape, why="batch dimensions differ")
    return a @ b, (a, b)


def _matmul_bwd(g, ctx, needs):
    a, b = ctx
    ga = gb = None
    if needs[0]:
        ga = g @ np.swapaxes(b, -1, -2)
        if a.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *a.shape).sum(axis=0)
    if needs[1]:
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


_register("matmul", _matmul_fwd, _matmul_bwd)


# ---------------------------------------------------------------- reductions

def _sum_fwd(xs, axis=None, keepdims=False):
    x = xs[0]
    return np.asarray(x.sum(axis=axis, keepdims=keepdims)), (x.shape, axis, keepdims)


def _sum_bwd(g, ctx, needs):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(xs, axis=None, keepdims=False):
    x = xs[0]
    count = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    return np.asarray(x.mean(axis=axis, keepdims=keepdims)), (x.shape, axis, keepdims, count)


def _mean_bwd(g, ctx, needs):
    shape, axis, keepdims, count = ctx
    (full,) = _sum_bwd(g, (shape, axis, keepdims), needs)
    return (full / count,)


_register("sum", _sum_fwd, _sum_bwd)
_register("mean", _mean_fwd, _mean_bwd)


# ---------------------------------------------------------------- structural

def _concat_fwd(xs, axis=0):
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise _fail("concat", *(y.shape for y in xs), why=f"mismatch off axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    return np.concatenate(xs, axis=ax), (ax, np.cumsum(sizes)[:-1])


def _concat_bwd(g, ctx, needs):
    ax, splits = ctx
    parts = np.split(g, splits, axis=ax)
    return tuple(p if n else None for p, n in zip(parts, needs))


def _slice_fwd(xs, index=()):
    x = xs[0]
    try:
        out = x[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {x.shape}") from exc
    return out, (x.shape, index)


def _slice_bwd(g, ctx, needs):
    shape, index = ctx
    full = np.zeros(shape)
    full[index] = g
    return (full,)


def _reshape_fwd(xs, shape=()):
    x = xs[0]
    try:
        out = x.reshape(shape)
    except ValueError as exc:
        raise _fail("reshape", x.shape, shape) from exc
    return out, x.shape


def _reshape_bwd(g, shape, needs):
    return (g.reshape(shape),)


def _transpose_fwd(xs, axes=None):
    x = xs[0]
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise _fail("transpose", x.shape, axes, why="bad permutation")
    return x.transpose(axes), tuple(np.argsort(axes))


def _transpose_bwd(g, inverse, needs):
    return (g.transpose(inverse),)


_register("concat", _concat_fwd, _concat_bwd)
_register("slice", _slice_fwd, _slice_bwd)
_register("reshape", _reshape_fwd, _reshape_bwd)
_register("transpose", _transpose_fwd, _transpose_bwd)


# ---------------------------------------------------------------- nonlinear

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu_fwd(xs):
    x = xs[0]
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def _gelu_bwd(g, ctx, needs):
    x, cdf = ctx
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf),)


def _tanh_fwd(xs):
    y = np.tanh(xs[0])
    return y, y


def _tanh_bwd(g, y, needs):
    return (g * (1.0 - y * y),)


def _softmax_fwd(xs, axis=-1):
    x = xs[0]
    y = x - x.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def _softmax_bwd(g, ctx, needs):
    y, axis = ctx
    gy = g * y
    gy -= y * gy.sum(axis=axis, keepdims=True)
    return (gy,)


def _layer_norm_fwd(xs, eps=1e-5):
    x, gamma, beta = xs
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise _fail("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layer_norm_bwd(g, ctx, needs):
    xhat, inv, gamma = ctx
    gx = ggamma = gbeta = None
    if needs[0]:
        gh = g * gamma
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    if needs[1]:
        ggamma = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    if needs[2]:
        gbeta = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, ggamma, gbeta


_register("gelu", _gelu_fwd, _gelu_bwd)
_register("tanh", _tanh_fwd, _tanh_bwd)
_register("softmax", _softmax_fwd, _softmax_bwd)
_register("layer_norm", _layer_norm_fwd, _layer_norm_bwd)


# ---------------------------------------------------------------- lookup / losses

def _embedding_fwd(xs, ids=None):
    table = xs[0]
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise _fail("embedding", table.shape, why="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    return table[ids], (table.shape, ids)


def _embedding_bwd(g, ctx, needs):
    shape, ids = ctx
    full = np.zeros(shape)
    np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
    return (full,)


def _sqerr_fwd(xs, weight=None):
    a, b = xs
    if a.shape != b.shape:
        raise _fail("squared_error", a.shape, b.shape)
    diff = a - b
    if weight is None:
        w, denom = None, float(diff.size)
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), a.shape)
        denom = float(w.sum())
        if denom <= 0:
            raise ShapeError("squared_error: weight mask selects no elements")
    sq = diff * diff if w is None else w * diff * diff
    return np.asarray(sq.sum() / denom), (diff, w, denom)


def _sqerr_bwd(g, ctx, needs):
    diff, w, denom = ctx
    base = (2.0 / denom) * diff * g
    if w is not None:
        base = base * w
    return (base if needs[0] else None, -base if needs[1] else None)


def _xent_fwd(xs, labels=None):
    logits = xs[0]
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _fail("cross_entropy", logits.shape, labels.shape)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    return np.asarray(-logp[np.arange(n), labels].mean()), (logp, labels)


def _xent_bwd(g, ctx, needs):
    logp, labels = ctx
    n = logp.shape[0]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return (grad * (g / n),)


_register("embedding", _embedding_fwd, _embedding_bwd)
_register("squared_error", _sqerr_fwd, _sqerr_bwd)
_register("cross_entropy", _xent_fwd, _xent_bwd)


# ---------------------------------------------------------------- public wrappers

def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", (a, b))


def add(a, b) -> Tensor:
    return apply_primitive("add", (a, b))


def subtract(a, b) -> Tensor:
    return apply_primitive("subtract", (a, b))


def multiply(a, b) -> Tensor:
    return apply_primitive("multiply", (a, b))


def scale(a, factor: float) -> Tensor:
    return apply_primitive("scale", (a,), factor=float(factor))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return apply_primitive("mean", (a,), axis=axis, keepdims=keepdims)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply_primitive("concat", tuple(tensors), axis=axis)


def slice_(a, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    return apply_primitive("slice", (a,), index=index)


def reshape(a, shape) -> Tensor:
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return apply_primitive("transpose", (a,), axes=None if axes is None else tuple(axes))


def gelu(a) -> Tensor:
    return apply_primitive("gelu", (a,))


def tanh(a) -> Tensor:
    return apply_primitive("tanh", (a,))


def softmax(a, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", (a,), axis=axis)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer_norm", (x, gamma, beta), eps=eps)


def embedding(table, ids) -> Tensor:
    return apply_primitive("embedding", (table,), ids=np.asarray(ids, dtype=np.int64))


def squared_error(pred, target, weight=None) -> Tensor:
    """Mean of ``(pred - target)**2``; with ``weight`` the sum is weighted and
    divided by ``weight.sum()`` (masked MSE)."""
    return apply_primitive("squared_error", (pred, target), weight=weight)


def cross_entropy(logits, labels) -> Tensor:
    return apply_primitive("cross_entropy", (logits,), labels=np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict[str, Tensor]) -> AdamState:
    return AdamState(0, {k: np.zeros_like(p.data) for k, p in params.items()},
                     {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction.

    ``grads`` maps parameter name to an array or Tensor; missing names are
    treated as zero gradient.
    """
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(getattr(g, "data", g))
        m, v = state.m.get(name), state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(f"adam_step: shape mismatch for {name}: param {p.shape}, "
                             f"grad {g.shape}, state {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
