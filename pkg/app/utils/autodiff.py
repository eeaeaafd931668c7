"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Each op builds its output eagerly and, when an input requires grad, keeps a
closure that pushes the upstream gradient to its parents. ``backward``
orders the recorded ops topologically (the tape) and replays them in
reverse.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._kink: Optional[float] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(values: np.ndarray, op: str, what: str = "output"):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite {what} in op '{op}'")


def _accumulate(t: Tensor, grad: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = grad.copy() if t.grad is None else t.grad + grad


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _broadcastable(a: Tensor, b: Tensor) -> bool:
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return True
    # bias-add: a 1-D vector onto the last axis of a matrix
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return True
    return a.data.ndim == 1 and b.data.ndim == 2 and b.shape[1] == a.shape[0]


def _require(ok: bool, op: str, a: Tensor, b: Tensor):
    if not ok:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# Forward ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _require(_broadcastable(a, b), "add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(_broadcastable(a, b), "sub", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))
    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(_broadcastable(a, b), "mul", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), "mul", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0], "matmul", a, b)

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), "matmul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)
    out = _make(np.where(mask, x.data, 0.0), (x,), "relu", backward)
    if x.data.size:
        out._kink = float(np.abs(x.data).min())
    return out


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; the identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        _accumulate(x, g * mask)
    return _make(x.data * mask, (x,), "dropout", backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        value = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * value)
    return _make(value, (x,), "exp", backward)


def negate(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, -g)
    return _make(-x.data, (x,), "negate", backward)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accumulate(x, g * c)
    return _make(x.data * c, (x,), "scalar_mul", backward)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute differences over the last axis (one value per row).

    The subgradient at a zero difference is 0.
    """
    _require(a.shape == b.shape, "l1_distance", a, b)
    diff = a.data - b.data
    sign = np.sign(diff)

    def backward(g):
        g = np.expand_dims(g, -1)
        _accumulate(a, g * sign)
        _accumulate(b, -g * sign)
    out = _make(np.abs(diff).sum(axis=-1), (a, b), "l1_distance", backward)
    if diff.size:
        out._kink = float(np.abs(diff).min())
    return out


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Per-row cross-entropy of ``logits`` (n, K) against integer labels (n,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"softmax_cross_entropy: shape mismatch {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"softmax_cross_entropy: labels out of range for {logits.shape[1]} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(labels.size)
    probs = np.exp(log_probs)

    def backward(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        _accumulate(logits, grad * g[:, None])
    return _make(-log_probs[rows, labels], (logits,), "softmax_cross_entropy", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ValueError(f"concat: shape mismatch {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)
    return _make(data, tensors, "concat", backward)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[:, start:stop]``."""
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"columns: bad slice {start}:{stop} of shape {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)
    return _make(x.data[:, start:stop], (x,), "columns", backward)


def total(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, np.full_like(x.data, float(g)))
    return _make(np.array(x.data.sum()), (x,), "sum", backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ValueError("mean of an empty tensor")

    def backward(g):
        _accumulate(x, np.full_like(x.data, float(g) / n))
    return _make(np.array(x.data.mean()), (x,), "mean", backward)


def gradient_reversal(x: Tensor, lam: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise ValueError(f"gradient reversal lambda must be >= 0, got {lam}")
    lam = float(lam)

    def backward(g):
        _accumulate(x, -lam * g)
    return _make(x.data.copy(), (x,), "gradient_reversal", backward)


# Tape and backward pass

class Tape:
    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        """Recorded ops reachable from ``loss``, every op after its inputs."""
        order, visited = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls([n for n in order if n._backward is not None])

    def kink_margin(self) -> float:
        """Distance of the recorded relu / l1 inputs to their non-smooth point."""
        margins = [n._kink for n in self.nodes if n._kink is not None]
        return min(margins) if margins else float("inf")

    def backward(self, loss: Tensor):
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            node._backward(node.grad)
            for parent in node._parents:
                if parent.grad is not None:
                    _check_finite(parent.grad, node.op, "gradient")


def backward(loss: Tensor) -> Tape:
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_loss(loss)
    if not len(tape):
        raise ValueError("backward on an empty tape: the loss does not depend on any parameter")
    tape.backward(loss)
    return tape


# Optimizer

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState, lr: float):
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("adam_step: params, grads and state must line up")
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} vs parameter {p.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    params: List[Tensor]
    lr: float
    state: AdamState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.for_params(self.params)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)


# Finite differences

def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                   numeric_fn: Optional[Callable[[], Tensor]] = None, floor: float = 1e-5) -> float:
    """Max relative error between analytic gradients of ``fn`` and five-point
    central differences of ``numeric_fn`` (defaults to ``fn``).

    Gradients smaller than ``floor`` are compared against ``floor``.
    """
    numeric_fn = numeric_fn or fn
    for p in params:
        p.zero_grad()
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            values = []
            for step in (2.0, 1.0, -1.0, -2.0):
                flat[i] = saved + step * h
                values.append(numeric_fn().item())
            flat[i] = saved
            numeric = (-values[0] + 8.0 * values[1] - 8.0 * values[2] + values[3]) / (12.0 * h)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
