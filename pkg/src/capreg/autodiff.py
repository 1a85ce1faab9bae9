"""Minimal reverse-mode automatic differentiation engine.

Tensors wrap numpy arrays and record the operations applied to them; calling
``backward()`` on a scalar result walks the recorded graph in reverse
topological order and accumulates gradients into every tensor that
participated. Gradients accumulate additively across fan-out; callers zero
them between optimizer steps.

64-bit floats are the default; call :func:`set_precision` to switch the
process-wide default to 32-bit for speed.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Misuse of the engine (double backward, missing gradient, ...)."""


class NumericalError(AutodiffError):
    """A forward op produced NaN or Inf from finite inputs."""


_dtype = np.float64


def set_precision(mode: str) -> None:
    """Set the default dtype: 'f64' (default) or 'f32'."""
    global _dtype
    if mode == "f64":
        _dtype = np.float64
    elif mode == "f32":
        _dtype = np.float32
    else:
        raise ValueError(f"unknown precision mode {mode!r}")


def default_dtype():
    return _dtype


class Tensor:
    """An n-dimensional array participating in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_backward_done", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._backward_done = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph.

        One backward pass per forward pass: calling this twice on the same
        result is an error.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise AutodiffError("backward() requires a scalar tensor")
        if self._backward_done:
            raise AutodiffError("backward() already ran on this graph; re-run the forward pass first")
        self._backward_done = True

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad += g
            if node._backward is not None:
                for parent, local in zip(node._parents, node._backward(g)):
                    if local is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + local
                    else:
                        grads[key] = local


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order; iterative so deep graphs don't overflow."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], list]) -> Tensor:
    # single reduction instead of np.all(np.isfinite(...)): any NaN/Inf in
    # the array leaves the sum non-finite
    if not np.isfinite(data.sum()):
        raise NumericalError("forward op produced non-finite values")
    out = Tensor(data)
    out._parents = tuple(parents)
    out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-D @ 2-D and 2-D @ 1-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2:
        raise ValueError(f"matmul: left operand must be 2-D, got shape {a.shape}")
    if b.data.ndim not in (1, 2):
        raise ValueError(f"matmul: right operand must be 1-D or 2-D, got shape {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    if b.data.ndim == 1:
        def backward(g):
            return [g[:, None] * b.data, a.data.T @ g]
    else:
        def backward(g):
            return [g @ b.data.T, a.data.T @ g]
    return _result(data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]
    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]
    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]
    return _result(a.data * b.data, (a, b), backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    # scalar operand against an array
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return [g * s * (1.0 - s)]
    return _result(s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)

    def backward(g):
        return [g * (1.0 - t * t)]
    return _result(t, (x,), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors."""
    parts = [_as_tensor(p) for p in parts]
    for p in parts:
        if p.data.ndim != 1:
            raise ValueError("concat: all inputs must be 1-D")
    sizes = [p.data.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return [g[offsets[i]:offsets[i + 1]] for i in range(len(parts))]
    return _result(np.concatenate([p.data for p in parts]), parts, backward)


def slice_(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ValueError("slice_: input must be 1-D")

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return [full]
    return _result(x.data[start:stop].copy(), (x,), backward)


def sum_(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        return [np.full_like(x.data, float(g))]
    return _result(np.asarray(x.data.sum()), (x,), backward)


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def backward(g):
        return [np.full_like(x.data, float(g) / n)]
    return _result(np.asarray(x.data.mean()), (x,), backward)


def mean_pool_2x2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over a 2-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] % 2 or x.shape[1] % 2:
        raise ValueError(f"mean_pool_2x2: need even 2-D shape, got {x.shape}")
    r, c = x.shape
    pooled = x.data.reshape(r // 2, 2, c // 2, 2).mean(axis=(1, 3))

    def backward(g):
        return [np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0]
    return _result(pooled, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("transpose: input must be 2-D")

    def backward(g):
        return [g.T]
    return _result(x.data.T.copy(), (x,), backward)


def add_colvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a column vector to every column of a 2-D tensor."""
    m, v = _as_tensor(m), _as_tensor(v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[0] != v.shape[0]:
        raise ValueError(f"add_colvec: incompatible shapes {m.shape} and {v.shape}")

    def backward(g):
        return [g, g.sum(axis=1)]
    return _result(m.data + v.data[:, None], (m, v), backward)


def ravel(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        return [g.reshape(x.data.shape)]
    return _result(x.data.reshape(-1).copy(), (x,), backward)


def scale(x: Tensor, k: float) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        return [g * k]
    return _result(x.data * k, (x,), backward)


# ---------------------------------------------------------------------------
# losses and heads


def softmax(logits: Tensor) -> Tensor:
    """Stable softmax over a 1-D logits vector (max subtraction)."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ValueError("softmax: input must be 1-D")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def backward(g):
        return [s * (g - np.dot(g, s))]
    return _result(s, (logits,), backward)


def cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    """Softmax cross entropy -log(S_y) against an integer class index."""
    logits = _as_tensor(logits)
    n = logits.data.size
    if not 0 <= target_index < n:
        raise IndexError(f"target index {target_index} out of range for {n} classes")
    z = logits.data - logits.data.max()
    log_z = np.log(np.exp(z).sum())
    loss = log_z - z[target_index]
    s = np.exp(z - log_z)

    def backward(g):
        d = s.copy()
        d[target_index] -= 1.0
        return [d * float(g)]
    return _result(np.asarray(loss), (logits,), backward)


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean of squared componentwise differences."""
    prediction, target = _as_tensor(prediction), _as_tensor(target)
    if prediction.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {prediction.shape} vs {target.shape}")
    diff = prediction.data - target.data
    n = diff.size

    def backward(g):
        d = 2.0 * diff / n * float(g)
        return [d, -d]
    return _result(np.asarray(np.mean(diff * diff)), (prediction, target), backward)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam optimizer with bias correction over a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise AutodiffError("Adam over a tensor without requires_grad")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update from the accumulated gradients, then zero them."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise AutodiffError("adam step with missing gradient")
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.zero_grad()


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    if list(params) != state.params:
        raise AutodiffError("adam state was built for a different parameter list")
    state.step()


# ---------------------------------------------------------------------------
# verification


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            h: float = 1e-5,
                            max_components: int | None = None,
                            rng: np.random.Generator | None = None,
                            zero_tol: float = 1e-9) -> float:
    """Compare backward() gradients of scalar f against central differences.

    Returns the worst componentwise relative error, with denominator
    max(|analytic|, |numeric|, 1e-8). When the input is large,
    ``max_components`` caps the number of randomly sampled components
    checked (all components by default).

    Components where both values fall below ``zero_tol`` count as agreeing:
    for a parameter whose true gradient is exactly zero (e.g. a direction
    the loss is invariant under), the central-difference estimate carries
    roundoff noise of order eps*|f|/h, which would otherwise dominate the
    floored denominator.
    """
    if not x.requires_grad:
        raise AutodiffError("finite_difference_check needs a requires_grad input")
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise AutodiffError("finite_difference_check requires a scalar-valued function")
    out.backward()
    analytic = x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    indices = np.arange(flat.size)
    if max_components is not None and flat.size > max_components:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=max_components, replace=False)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        if max(abs(a_flat[i]), abs(numeric)) < zero_tol:
            continue
        denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(_dtype)
