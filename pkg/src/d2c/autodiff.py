"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``; operations on tensors that require
gradients record a closure that maps the output gradient to the gradients of
the inputs. :meth:`Tensor.backward` replays the tape in reverse topological
order. The op set is deliberately small: matmul, broadcasting arithmetic,
elementwise nonlinearities, reductions, reshapes and slicing.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "logsumexp",
    "gradcheck",
    "no_grad",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")
    # make numpy defer to our reflected operators (ndarray @ Tensor etc.)
    __array_ufunc__ = None

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(value, parents: Sequence["Tensor"], backward) -> "Tensor":
        if _grad_enabled and any(p.requires_grad for p in parents):
            return Tensor(value, True, parents, backward)
        return Tensor(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward pass ----------------------------------------------------------

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.broadcast_to(grad, self.shape).astype(np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic ---------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.value + other.value,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.value, other.value
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.value, other.value
        out = x / y
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        x = self.value
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.value, other.value

        def back(g):
            gx = g @ np.swapaxes(y, -1, -2) if y.ndim > 1 else np.multiply.outer(g, y)
            gy = np.swapaxes(x, -1, -2) @ g if x.ndim > 1 else np.multiply.outer(x, g)
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return Tensor._make(x @ y, (self, other), back)

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    # -- elementwise ----------------------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.value)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.value
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.value)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def square(self) -> "Tensor":
        x = self.value
        return Tensor._make(x * x, (self,), lambda g: (2.0 * g * x,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.value)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.value)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self) -> "Tensor":
        mask = self.value > 0
        return Tensor._make(self.value * mask, (self,), lambda g: (g * mask,))

    def silu(self) -> "Tensor":
        x = self.value
        s = _sigmoid(x)
        return Tensor._make(x * s, (self,), lambda g: (g * (s + x * s * (1.0 - s)),))

    def clip(self, lo: float, hi: float) -> "Tensor":
        x = self.value
        inside = (x >= lo) & (x <= hi)
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g: (g * inside,))

    # -- reductions and shape -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.value.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.value.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.value.T, (self,), lambda g: (g.T,))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.value[idx], (self,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split branches keep exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.value for t in tensors], axis=axis), tensors, back)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable ``log(sum(exp(x)))`` along ``axis`` (dimension dropped)."""
    m = x.value.max(axis=axis, keepdims=True)
    e = np.exp(x.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s
    return Tensor._make(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,))


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    n_checks: int = 100,
    eps: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. Uses the fourth-order stencil
    ``(-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h``; its truncation error is
    ``O(h^4)``, so a fairly large ``h`` keeps roundoff small even for
    coordinates with tiny gradients. Returns the worst relative error over
    ``n_checks`` randomly chosen scalar coordinates, drawn across all
    parameters.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.value.size for p in params])
    flat = rng.choice(sizes.sum(), size=min(n_checks, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for k in flat:
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        j = int(k - offsets[i])
        view = params[i].value.reshape(-1)
        orig = view[j]
        vals = []
        for step in (2, 1, -1, -2):
            view[j] = orig + step * eps
            vals.append(float(loss_fn().value))
        view[j] = orig
        numeric = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
        exact = analytic[i].reshape(-1)[j]
        scale = max(abs(numeric), abs(exact), 1e-8)
        worst = max(worst, abs(numeric - exact) / scale)
    return worst
