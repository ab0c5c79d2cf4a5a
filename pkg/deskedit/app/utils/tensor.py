"""
Dense float64 tensors with a reverse-mode gradient tape.

Tensors are immutable: the wrapped array is read-only and every operation
returns a new Tensor. Operations executed while a ``GradientTape`` is active
on the current thread are recorded on it whenever one of their inputs is
watched (or derived from a watched tensor)::

    with GradientTape() as tape:
        tape.watch(x)
        y = tensor.sum(tensor.mul(x, x))
    dx = grad(tape, y, x)

The primitive set is closed: add, sub, mul, scale, matmul, transpose,
reshape, expand, concat, take, sum, mean, softmax_rows, layer_norm, gelu,
tanh and cosine_similarity. Everything else is composed from these.

Implicit broadcasting covers two cases only: a scalar against any tensor,
and a tensor whose shape is a trailing suffix of the other operand's shape
(the per-row-vector case). Anything else needs an explicit ``expand``.
"""
import math
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from deskedit.app.utils.exceptions import DimensionError, GraphError, NumericsError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


def _tape_stack() -> List["GradientTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


class Tensor:
    """Immutable row-major array of 64-bit floats."""

    __slots__ = ("_data",)

    def __init__(self, data: ArrayLike):
        if isinstance(data, Tensor):
            arr = data._data
        else:
            arr = np.array(data, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericsError("tensor data must be finite")
            arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"{op} produced non-finite values")
        if arr.flags.writeable:
            arr.flags.writeable = False
        out = object.__new__(cls)
        out._data = arr
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        """Writable copy of the data."""
        return np.array(self._data)

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError("item() needs a single-element tensor", self.shape)
        return float(self._data.reshape(-1)[0])

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a Python scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self._data, precision=4, threshold=8)})"


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape)))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Tuple[Tensor, ...], backward: Backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradientTape:
    """Records operations on watched tensors for one reverse pass.

    A tape is owned by one thread. Several tapes may be active at once
    (nested ``with`` blocks); each records independently.
    """

    def __init__(self):
        self._nodes: List[_Node] = []
        self._tracked: Dict[int, Tensor] = {}

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        for i in range(len(stack) - 1, -1, -1):
            if stack[i] is self:
                del stack[i]
                break

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise GraphError("only Tensors can be watched")
            self._tracked[id(t)] = t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, out: Tensor, parents: Tuple[Tensor, ...], backward: Backward) -> None:
        if any(id(p) in self._tracked for p in parents):
            self._tracked[id(out)] = out
            self._nodes.append(_Node(out, parents, backward))

    def gradients(self, output: Tensor, inputs: Sequence[Tensor]) -> List[Tensor]:
        """Gradients of a scalar ``output`` with respect to each of ``inputs``."""
        if output.size != 1:
            raise DimensionError("gradient output must be a scalar", output.shape)
        for inp in inputs:
            if id(inp) not in self._tracked:
                raise GraphError(f"input of shape {inp.shape} is not on the tape")

        grads: Dict[int, np.ndarray] = {}
        if id(output) in self._tracked:
            grads[id(output)] = np.ones(output.shape)
            for node in reversed(self._nodes):
                g = grads.get(id(node.out))
                if g is None:
                    continue
                for parent, pg in zip(node.parents, node.backward(g)):
                    if pg is None or id(parent) not in self._tracked:
                        continue
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg

        return [Tensor._wrap(np.array(grads[id(i)]) if id(i) in grads else np.zeros(i.shape), "grad")
                for i in inputs]

    def gradient(self, output: Tensor, inp: Tensor) -> Tensor:
        return self.gradients(output, [inp])[0]


def grad(tape: GradientTape, output: Tensor, inp: Tensor) -> Tensor:
    """Exact reverse-mode gradient of ``output`` with respect to ``inp``."""
    return tape.gradient(output, inp)


def _emit(arr: np.ndarray, op: str, parents: Tuple[Tensor, ...], backward: Backward) -> Tensor:
    out = Tensor._wrap(arr, op)
    for tape in _tape_stack():
        tape._record(out, parents, backward)
    return out


# --- broadcasting helpers ---

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if b.ndim == 0:
        return a.shape
    if a.ndim == 0:
        return b.shape
    if a.ndim > b.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return a.shape
    if b.ndim > a.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return b.shape
    raise DimensionError(f"{op} operands cannot be broadcast", a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --- elementwise ---

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, "add", (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, "sub", (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, "mul", (a, b), backward)


def scale(x: ArrayLike, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _emit(x.data * c, "scale", (x,), backward)


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _emit(out, "tanh", (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: ArrayLike) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    u = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(u)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _emit(0.5 * v * (1.0 + t), "gelu", (x,), backward)


# --- linear algebra and layout ---

def _swap_last(arr: np.ndarray) -> np.ndarray:
    return np.swapaxes(arr, -1, -2)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands carry the same leading batch axes, or ``b`` is a
    plain matrix shared across the batch of ``a`` (or vice versa).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", a.shape, b.shape)
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("matmul batch dimensions differ", a.shape, b.shape)

    def backward(g):
        ga = g @ _swap_last(b.data)
        gb = _swap_last(a.data) @ g
        if a.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _emit(a.data @ b.data, "matmul", (a, b), backward)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; swaps the last two by default."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError("transpose needs rank >= 2", x.shape)
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes}", x.shape)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _emit(np.ascontiguousarray(np.transpose(x.data, axes)), "transpose", (x,), backward)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape size mismatch", x.shape, shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit(out, "reshape", (x,), backward)


def expand(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Repeat size-1 axes to ``shape`` (same rank required)."""
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if x.ndim != len(shape) or any(s != d and s != 1 for s, d in zip(x.shape, shape)):
        raise DimensionError("expand needs matching rank and size-1 axes", x.shape, shape)
    axes = tuple(i for i, (s, d) in enumerate(zip(x.shape, shape)) if s == 1 and d != 1)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _emit(np.broadcast_to(x.data, shape).copy(), "expand", (x,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise DimensionError("concat shapes disagree off the concatenation axis", parts[0].shape, p.shape)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(np.concatenate([p.data for p in parts], axis=ax), "concat", parts, backward)


def take(x: ArrayLike, indices: Union[Sequence[int], np.ndarray]) -> Tensor:
    """Gather along the first axis; the gradient scatter-adds back."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise DimensionError("take index out of range", x.shape, idx.shape)

    def backward(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(np.take(x.data, idx, axis=0), "take", (x,), backward)


# --- reductions ---

def sum(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, x.shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), "sum", (x,), backward)


def mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --- neural primitives ---

def softmax_rows(x: ArrayLike) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, "softmax_rows", (x,), backward)


def layer_norm(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        gx = (inv / n) * (n * g - g.sum(axis=-1, keepdims=True)
                          - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx,)

    return _emit(xhat, "layer_norm", (x,), backward)


def cosine_similarity(a: ArrayLike, b: ArrayLike, floor: float = 1e-12) -> Tensor:
    """Row-wise cosine over the last axis; norms below ``floor`` are clamped to it."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("cosine_similarity shapes differ", a.shape, b.shape)
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    da = np.maximum(na, floor)
    db = np.maximum(nb, floor)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (da * db)

    def backward(g):
        gk = g[..., None]
        ga = b.data / (da * db) - np.where(na >= floor, cos * a.data / (da * da), 0.0)
        gb = a.data / (da * db) - np.where(nb >= floor, cos * b.data / (db * db), 0.0)
        return gk * ga, gk * gb

    return _emit(cos[..., 0], "cosine_similarity", (a, b), backward)
