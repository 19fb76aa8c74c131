"""
Dense fp64 tensors with reverse-mode gradients
The differentiable substrate for tokenizers, top-layer models and objectives
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractViolation, InvalidArgument

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
SeedLike = Union[int, np.random.Generator, None]

_grad_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (per thread)"""
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """fp64 array with an optional gradient buffer and the op that produced it"""

    __slots__ = ("data", "grad", "requires_grad", "frozen_rows", "name",
                 "_parents", "_backward", "_op", "_retain")
    # ndarray op Tensor defers to the Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        # rows of a leaf that optimizers must leave untouched
        self.frozen_rows: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[GradFn] = None
        self._op = ""
        self._retain = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: GradFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.frozen_rows = None
        out.name = None
        out._op = op
        out._retain = False
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # --- introspection -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def has_nan(self) -> bool:
        return bool(np.isnan(self.data).any())

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # --- gradient computation ------------------------------------------

    def backward(self) -> None:
        """Populate .grad on every reachable leaf that requires a gradient.

        Gradients accumulate: calling backward twice without zero_grad doubles them.
        """
        if self.data.size != 1:
            raise ContractViolation(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractViolation("backward called on a tensor that does not require grad")

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf and node.frozen_rows is not None and node.frozen_rows.any():
                g = g.copy()
                g[node.frozen_rows] = 0.0
            if node.is_leaf or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node.is_leaf:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    # --- operators -----------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other) -> "Tensor":
        return matmul(as_tensor(other), self)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def take(self, indices, axis: int = 0) -> "Tensor":
        return take(self, indices, axis)

    def relu(self) -> "Tensor":
        return relu(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return Tensor._from_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return Tensor._from_op(np.power(a.data, exponent), (a,), backward, "pow")


def relu(a: Tensor) -> Tensor:
    gate = a.data > 0
    return Tensor._from_op(np.where(gate, a.data, 0.0), (a,), lambda g: (g * gate,), "relu")


def reglu(a: Tensor) -> Tensor:
    """Split the last axis into (linear, gate) halves and return linear * relu(gate)"""
    width = a.shape[-1]
    if width % 2:
        raise InvalidArgument(f"reglu needs an even last dimension, got {width}")
    half = width // 2
    linear, gate = a.data[..., :half], a.data[..., half:]
    active = gate > 0
    gated = np.where(active, gate, 0.0)

    def backward(g):
        return (np.concatenate([g * gated, np.where(active, g * linear, 0.0)], axis=-1),)

    return Tensor._from_op(linear * gated, (a,), backward, "reglu")


# --- reductions and shape ops --------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(reduce_sum(a, axes, keepdims), 1.0 / count)


def sorted_mean(a: Tensor, axis: int = -2) -> Tensor:
    """Mean along one axis whose value does not depend on the order of that axis.

    The operands are sorted before the left-to-right reduction, so any permutation
    of the input along `axis` produces a bitwise identical result.
    """
    axis = axis % a.ndim
    n = a.shape[axis]
    if n == 0:
        raise InvalidArgument("mean over an empty axis")
    ordered = np.sort(a.data, axis=axis)
    total = np.take(ordered, 0, axis=axis)
    for i in range(1, n):
        total = total + np.take(ordered, i, axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return Tensor._from_op(total / n, (a,), backward, "sorted_mean")


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), backward, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along `axis`; repeated indices accumulate their gradients"""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        target = np.moveaxis(full, axis, 0)
        source = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(target, indices, source)
        return (full,)

    return Tensor._from_op(out, (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgument("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


# --- composite primitives ------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(probs, (a,), backward, "softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (N, C) logits against integer labels"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ContractViolation(f"cross_entropy shape mismatch: {logits.shape} vs {labels.shape}")
    n = labels.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    loss = np.mean(log_norm - picked)

    def backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[np.arange(n), labels] -= 1.0
        return (probs * (g / n),)

    return Tensor._from_op(np.asarray(loss), (logits,), backward, "cross_entropy")


def mean_squared_error(predictions: Tensor, targets) -> Tensor:
    diff = predictions - as_tensor(np.asarray(targets, dtype=np.float64).reshape(predictions.shape))
    return reduce_mean(diff * diff)


def squared_distance(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    diff = a - b
    return reduce_sum(diff * diff, axis)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    centered = x - reduce_mean(x, -1, keepdims=True)
    variance = reduce_mean(centered * centered, -1, keepdims=True)
    return centered * power(variance + eps, -0.5) * weight + bias


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise over the batch axis; also return the batch mean and biased variance"""
    centered = x - reduce_mean(x, 0, keepdims=True)
    variance = reduce_mean(centered * centered, 0, keepdims=True)
    out = centered * power(variance + eps, -0.5) * weight + bias
    return out, x.data.mean(axis=0), variance.data.reshape(-1)


def dropout_mask(shape, rate: float, rng: SeedLike = None) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability `rate`, survivors scaled by 1/(1-rate)"""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgument(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=np.float64)
    generator = np.random.default_rng(rng)
    keep = generator.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x: Tensor, rate: float, rng: SeedLike, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return x
    return x * dropout_mask(x.shape, rate, rng)


# --- optimisation ----------------------------------------------------------

@dataclass
class AdamWState:
    """Moment buffers and hyperparameters for decoupled-weight-decay Adam"""
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3
    weight_decay: float = 2e-4

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamWState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adamw_step(params: Sequence[Tensor], state: AdamWState) -> AdamWState:
    """One in-place AdamW update: θ ← θ − lr·wd·θ − lr·m̂/(√v̂+ε).

    Rows flagged in `Tensor.frozen_rows` keep their exact values. Gradients are left
    for the caller to reset.
    """
    if len(params) != len(state.first_moment):
        raise ContractViolation("optimizer state is not aligned with the parameter list")
    for p in params:
        if p.grad is None:
            raise ContractViolation(f"parameter {p.name or p.shape} has no gradient")

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise ContractViolation(f"moment buffer shape {m.shape} != parameter shape {p.shape}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        update = state.learning_rate * (m_hat / (np.sqrt(v_hat) + state.epsilon) + state.weight_decay * p.data)
        if p.frozen_rows is not None and p.frozen_rows.any():
            update[p.frozen_rows] = 0.0
            m[p.frozen_rows] = 0.0
            v[p.frozen_rows] = 0.0
        p.data -= update
    return state


class AdamW:
    """Optimizer wrapper that owns its parameter list and AdamWState"""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, weight_decay: float = 2e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.data.size > 0]
        self.state = AdamWState.for_params(
            self.params, beta1=betas[0], beta2=betas[1], epsilon=eps,
            learning_rate=lr, weight_decay=weight_decay,
        )

    def step(self) -> None:
        adamw_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# --- checking --------------------------------------------------------------

def finite_difference_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d fn() / d tensor, perturbing tensor.data in place"""
    estimate = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = estimate.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = fn().item()
        flat[i] = original - h
        lower = fn().item()
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * h)
    return estimate


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale_ = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale_)) if analytic.size else 0.0
