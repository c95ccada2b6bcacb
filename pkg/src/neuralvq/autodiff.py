"""Minimal reverse-mode automatic differentiation over numpy arrays.

Primitives: linear, relu, concat (axis 1), add, gather_rows, mse_loss.
Each op eagerly computes its value and records a closure that scatters the
incoming gradient to its parents. backward() walks nodes in reverse
topological order; both the walk and every accumulation are sequential, so
gradients are bit-reproducible for identical inputs.

Also hosts the optimizer side: AdamW with decoupled weight decay, a cosine
learning-rate schedule, and global-norm gradient clipping.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_param_ids = itertools.count()


class Tensor:
    """A node in the computation graph holding a float32 array value."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float32)
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, value, name: str | None = None):
        value = np.array(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float32)
        super().__init__(value, requires_grad=True)
        self.name = name if name is not None else f"p{next(_param_ids)}"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w with an optional broadcast row bias."""
    y = x.value @ w.value
    if b is not None:
        y = y + b.value

    def back(g):
        if x.requires_grad:
            x._accum(g @ w.value.T)
        if w.requires_grad:
            w._accum(x.value.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(y, parents, back)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.value, 0.0)

    def back(g):
        if x.requires_grad:
            x._accum(g * (x.value > 0))

    return Tensor(y, (x,), back)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1."""
    y = np.concatenate([a.value, b.value], axis=1)
    split = a.value.shape[1]

    def back(g):
        if a.requires_grad:
            a._accum(g[:, :split])
        if b.requires_grad:
            b._accum(g[:, split:])

    return Tensor(y, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ConfigError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    y = a.value + b.value

    def back(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return Tensor(y, (a, b), back)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a (k, d) table by an integer vector."""
    idx = np.asarray(idx)
    y = table.value[idx]

    def back(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            k = table.value.shape[0]
            # per-column bincount scatter-add: same sequential accumulation
            # order as np.add.at but far faster for small row widths
            for j in range(table.value.shape[1]):
                table.grad[:, j] += np.bincount(
                    idx, weights=g[:, j], minlength=k
                ).astype(table.grad.dtype)

    return Tensor(y, (table,), back)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over rows of the squared euclidean distance (sum over features)."""
    diff = pred.value - target.value
    n = max(1, pred.value.shape[0])
    y = np.asarray((diff.astype(np.float64) ** 2).sum() / n, dtype=diff.dtype)

    def back(g):
        scale = 2.0 * float(g) / n
        if pred.requires_grad:
            pred._accum(scale * diff)
        if target.requires_grad:
            target._accum(-scale * diff)

    return Tensor(y, (pred, target), back)


def backward(root: Tensor) -> None:
    """Reverse-topological gradient sweep from a scalar root."""
    if root.value.ndim != 0:
        raise ConfigError("backward expects a scalar loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint l2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class CosineSchedule:
    """Cosine decay from max_lr down to min_fraction * max_lr.

    An optional linear warmup from 0 occupies the first warmup_steps; the
    cosine phase then runs to total_steps.
    """

    max_lr: float
    total_steps: int
    min_fraction: float = 1e-3
    warmup_steps: int = 0

    def __call__(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.max_lr * step / self.warmup_steps
        lo = self.max_lr * self.min_fraction
        span = max(1, self.total_steps - self.warmup_steps)
        t = min(1.0, max(0.0, (step - self.warmup_steps) / span))
        return lo + (self.max_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay (decay applied before the update)."""

    def __init__(
        self,
        params,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            if self.weight_decay:
                p.value -= np.float32(lr * self.weight_decay) * p.value
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            p.value -= np.float32(lr) * m_hat / (np.sqrt(v_hat) + self.eps)
