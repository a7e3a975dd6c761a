"""
Dense tensors with tape-based reverse-mode differentiation.

Every value is a float64 numpy array. Operations on tensors that require
gradients remember their inputs and an adjoint closure; ``backward`` orders
the reachable graph into a ``Tape`` and replays the adjoints in reverse.
"""

import contextlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording adjoints (teacher runs, evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float64 array with an optional gradient accumulator."""

    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._adjoint: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], adjoint, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._adjoint = adjoint if track else None
        return out

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

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), adjoint, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), adjoint, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), adjoint, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._from_op(a.data / b.data, (a, b), adjoint, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def adjoint(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._from_op(out, (a,), adjoint, "power")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _logistic(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    e = np.exp(x[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def logistic(a: ArrayLike) -> Tensor:
    """Numerically stable sigmoid."""
    a = as_tensor(a)
    out = _logistic(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "logistic")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    live = a.data > 0
    return Tensor._from_op(np.where(live, a.data, 0.0), (a,), lambda g: (g * live,), "relu")


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def adjoint(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._from_op(np.maximum(a.data, b.data), (a, b), adjoint, "maximum")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: ArrayLike) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def adjoint(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor._from_op(out, (a,), adjoint, "gelu")


# -- linear algebra and shape ----------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 1:
        if a.shape != b.shape:
            raise DimensionError(f"dot product of vectors with shapes {a.shape} and {b.shape}")
        return tsum(a * b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def adjoint(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(a.data @ b.data, (a, b), adjoint, "matmul")


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), adjoint, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)

    def adjoint(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(a.data[index], dtype=np.float64), (a,), adjoint, "getitem")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=axis), parts, adjoint, "concat")


def rotate_pairs(a: ArrayLike, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding over the last axis (rotate-half convention)."""
    a = as_tensor(a)
    half = a.shape[-1] // 2
    if a.shape[-1] % 2:
        raise DimensionError(f"rotary encoding needs an even last dimension, got {a.shape}")

    def rot(x):
        return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)

    def rot_t(y):
        return np.concatenate([y[..., half:], -y[..., :half]], axis=-1)

    out = a.data * cos + rot(a.data) * sin
    return Tensor._from_op(out, (a,), lambda g: (g * cos + rot_t(g * sin),), "rotary")


# -- normalizers -------------------------------------------------------------

def _check_last_axis(a: Tensor, op: str) -> None:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError(f"{op} needs a non-empty last dimension, got shape {a.shape}")


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Max-shifted softmax. Rows may hold -inf (masked) entries but not only those."""
    a = as_tensor(a)
    _check_last_axis(a, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), adjoint, "softmax")


def softmax_rows(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a, axis=-1)


def log_sum_exp(a: ArrayLike, axis: int = -1) -> Tensor:
    """log Σ exp over ``axis`` (reduced), max-shifted."""
    a = as_tensor(a)
    _check_last_axis(a, "log_sum_exp")
    if a.shape[axis] == 0:
        raise DimensionError(f"log_sum_exp over an empty axis, shape {a.shape}")
    peak = a.data.max(axis=axis, keepdims=True)
    total = np.exp(a.data - peak).sum(axis=axis, keepdims=True)
    out = np.squeeze(peak + np.log(total), axis=axis)
    weights = np.exp(a.data - np.expand_dims(out, axis))

    def adjoint(g):
        return (np.expand_dims(g, axis) * weights,)

    return Tensor._from_op(out, (a,), adjoint, "log_sum_exp")


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_last_axis(a, "log_softmax")
    peak = a.data.max(axis=axis, keepdims=True)
    lse = peak + np.log(np.exp(a.data - peak).sum(axis=axis, keepdims=True))
    out = a.data - lse
    probs = np.exp(out)

    def adjoint(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), adjoint, "log_softmax")


def rms_norm(a: ArrayLike, gain: ArrayLike, eps: float = 1e-6) -> Tensor:
    a = as_tensor(a)
    scale = (mean(a * a, axis=-1, keepdims=True) + eps) ** -0.5
    return a * scale * gain


# -- tape and backward -------------------------------------------------------

@dataclass
class TapeEntry:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    op: str


class Tape:
    """Ordered record of the operations reachable from a root.

    Entries are stored inputs-first, so replaying them back to front is a
    reverse topological order.
    """

    def __init__(self, entries: List[TapeEntry]):
        self.entries = entries

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: List[TapeEntry] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(TapeEntry(node, node._parents, node.op))
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        pending: Dict[int, np.ndarray] = {id(root): seed}
        for entry in reversed(self.entries):
            node = entry.output
            g = pending.pop(id(node), None)
            if g is None:
                continue
            g = np.array(g, dtype=np.float64)
            node.grad = g if node.grad is None else node.grad + g
            if node._adjoint is None:
                continue
            for parent, parent_grad in zip(entry.inputs, node._adjoint(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad tensor."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward called on a loss that does not require grad")
        return Tape([])
    tape = Tape.record(loss)
    tape.replay(loss, np.ones(loss.shape))
    return tape


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- finite-difference oracle -----------------------------------------------

def numerical_grad(
    closure: Callable[[], float], array: np.ndarray, eps: float = 1e-5, coords: Optional[np.ndarray] = None
) -> np.ndarray:
    """Central differences of ``closure()`` w.r.t. ``array``, perturbed in place.

    ``coords`` restricts the differences to those flat indices; the other
    entries of the result stay zero.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        original = flat[i]
        flat[i] = original + eps
        plus = closure()
        flat[i] = original - eps
        minus = closure()
        flat[i] = original
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise NonFiniteError(
                f"non-finite value while perturbing coordinate {i}",
                {"coordinate": int(i), "plus": plus, "minus": minus},
            )
        out[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(fn: Callable[[Tensor], Tensor], at: ArrayLike, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = Tensor(as_tensor(at).data.copy(), requires_grad=True)
    loss = fn(x)
    if not math.isfinite(loss.item()):
        raise NonFiniteError("grad_check: non-finite function value", {"value": loss.item()})
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("grad_check: non-finite analytic gradient")

    point = x.data.copy()

    def closure() -> float:
        with no_grad():
            return fn(Tensor(point)).item()

    numeric = numerical_grad(closure, point, eps)
    return relative_error(analytic, numeric)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-5,
    points: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, float]:
    """grad_check over named parameter tensors captured by ``loss_fn``.

    With ``points`` only that many random coordinates of each tensor are
    compared.
    """
    zero_grads(params.values())
    backward(loss_fn())
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params.items()}
    zero_grads(params.values())

    def closure() -> float:
        with no_grad():
            return loss_fn().item()

    rng = rng if rng is not None else np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        size = p.data.size
        coords = None if points is None or points >= size else rng.choice(size, size=points, replace=False)
        picked = slice(None) if coords is None else coords
        numeric = numerical_grad(closure, p.data, eps, coords).reshape(-1)
        errors[name] = relative_error(analytic[name].reshape(-1)[picked], numeric[picked])
    return errors


def dump_csv(tensor: ArrayLike, path: Path) -> Path:
    """Row-major CSV dump; the header line is the shape."""
    data = as_tensor(tensor).data
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = data.reshape(1, -1) if data.ndim < 2 else data.reshape(-1, data.shape[-1])
    header = ",".join(str(s) for s in data.shape)
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")
    return path
