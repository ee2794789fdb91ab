"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a node to the active :class:`Tape`; calling
:func:`backward` replays that tape in reverse. Only what the skippable
network needs is here: matmul, bias-row addition, elementwise addition,
ReLU, sigmoid, sum and softmax cross-entropy.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Backward was requested for something the tape never recorded."""


class Tensor:
    """A dense array with an optional gradient slot."""

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)


class Parameter(Tensor):
    """A leaf tensor that optimizers update unless it is frozen."""

    def __init__(self, values, frozen: bool = False):
        super().__init__(values, requires_grad=True)
        self.frozen = frozen

    @property
    def trainable(self) -> bool:
        return not self.frozen

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, frozen={self.frozen})"


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


@dataclass
class Tape:
    """Ordered record of executed ops."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> Tape:
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().tapes.pop()


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.tapes: list[Tape] = [Tape()]
        self.grad_enabled = True
        self.counters: list[FlopCounter] = []


_local = _ThreadState()


def _state() -> _ThreadState:
    return _local


def current_tape() -> Tape:
    return _state().tapes[-1]


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@dataclass
class FlopCounter:
    """Accumulates multiply-adds performed inside :func:`matmul`."""

    macs: int = 0


@contextlib.contextmanager
def count_macs():
    counter = FlopCounter()
    _state().counters.append(counter)
    try:
        yield counter
    finally:
        _state().counters.pop()


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad and t.trainable


def _record(op: str, inputs: tuple[Tensor, ...], out_values: np.ndarray, backward_fn) -> Tensor:
    st = _state()
    track = st.grad_enabled and any(_needs_grad(t) for t in inputs)
    out = Tensor(out_values, requires_grad=track)
    if track:
        st.tapes[-1].record(Node(inputs, out, backward_fn, op))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    for counter in _state().counters:
        counter.macs += a.shape[0] * a.shape[1] * b.shape[1]
    av, bv = a.values, b.values

    def backward_fn(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", (a, b), av @ bv, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _record("add", (a, b), a.values + b.values, lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Adds a length-k bias vector to every row of an [p x k] tensor."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.values.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not fit rows of {x.shape}")
    return _record("add_bias", (x, bias), x.values + bias.values, lambda g: (g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0
    return _record("relu", (x,), np.where(mask, x.values, 0.0), lambda g: (g * mask,))


def _sigmoid_values(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    """Logistic function. Plain numbers and arrays in, plain values out."""
    if isinstance(x, Tensor):
        s = _sigmoid_values(x.values)
        return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))
    arr = np.asarray(x, dtype=DTYPE)
    s = _sigmoid_values(np.atleast_1d(arr)).reshape(arr.shape)
    return float(s) if s.ndim == 0 else s


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record("sum", (x,), np.asarray(x.values.sum()), lambda g: (np.full(shape, g),))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.values.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_z
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()
    probs = np.exp(logp)

    def backward_fn(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (g * d / labels.size,)

    return _record("softmax_xent", (logits,), np.asarray(loss), backward_fn)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable trainable leaf."""
    tape = tape if tape is not None else current_tape()
    if loss.values.size != 1:
        raise TapeError("backward needs a scalar loss")
    if not any(node.output is loss for node in tape.nodes):
        raise TapeError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g if node.output.grad is None else node.output.grad + g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not _needs_grad(inp):
                continue
            if isinstance(inp, Parameter):
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float = 0.1):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            p.values -= self.lr * p.grad


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.values -= self.lr * self.weight_decay * p.values
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. the array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f()
        x[idx] = orig - eps
        lo = f()
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
    return grad
