"""Minimal reverse-mode autodiff over float32 numpy arrays.

Values are 32-bit throughout; matmul and sum/mean run their accumulations in
64-bit and cast back, which keeps finite-difference gradient checks stable.
Graph recording is controlled per-context (`no_grad`) via a ContextVar so
concurrent forward passes over a shared read-only parameter set stay safe.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Iterable, Sequence

import numpy as np

from ..exceptions import ContractViolation, NumericOverflowError, ShapeMismatch

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block; forward values are unchanged."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


def _mm64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # 64-bit accumulation, 32-bit storage
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(np.float32)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to `shape` by summing over broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"

    # ---- construction helpers -------------------------------------------------

    @staticmethod
    def _ensure(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._backward_fn = None
        out._op = op
        if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
        else:
            out.requires_grad = False
            out._parents = ()
        return out

    def _accum(self, g: np.ndarray, op: str) -> None:
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError(op)
        g = g.astype(np.float32, copy=False)
        self.grad = g if self.grad is None else self.grad + g

    # ---- basic introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # ---- arithmetic ---------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._ensure(other)
        try:
            data = self.data + other.data
        except ValueError as e:
            raise ShapeMismatch(f"add: {self.shape} vs {other.shape}") from e
        out = Tensor._result(data, (self, other), "add")
        if out.requires_grad:
            a, b = self, other

            def backward(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.shape), "add")
                if b.requires_grad:
                    b._accum(_unbroadcast(g, b.shape), "add")

            out._backward_fn = backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor._result(-self.data, (self,), "neg")
        if out.requires_grad:
            a = self
            out._backward_fn = lambda g: a._accum(-g, "neg")
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor._ensure(other))

    def __rsub__(self, other) -> "Tensor":
        return Tensor._ensure(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor._ensure(other)
        try:
            data = self.data * other.data
        except ValueError as e:
            raise ShapeMismatch(f"multiply: {self.shape} vs {other.shape}") from e
        out = Tensor._result(data, (self, other), "multiply")
        if out.requires_grad:
            a, b = self, other

            def backward(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g * b.data, a.shape), "multiply")
                if b.requires_grad:
                    b._accum(_unbroadcast(g * a.data, b.shape), "multiply")

            out._backward_fn = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._ensure(other)
        try:
            data = self.data / other.data
        except ValueError as e:
            raise ShapeMismatch(f"divide: {self.shape} vs {other.shape}") from e
        out = Tensor._result(data, (self, other), "divide")
        if out.requires_grad:
            a, b = self, other

            def backward(g):
                if a.requires_grad:
                    a._accum(_unbroadcast(g / b.data, a.shape), "divide")
                if b.requires_grad:
                    gb = -g * a.data / (b.data * b.data)
                    b._accum(_unbroadcast(gb, b.shape), "divide")

            out._backward_fn = backward
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._ensure(other) / self

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._ensure(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ContractViolation(
                f"matmul requires >=2-d operands, got {self.shape} @ {other.shape}"
            )
        try:
            data = _mm64(self.data, other.data)
        except ValueError as e:
            raise ShapeMismatch(f"matmul: {self.shape} @ {other.shape}") from e
        out = Tensor._result(data, (self, other), "matmul")
        if out.requires_grad:
            a, b = self, other

            def backward(g):
                if a.requires_grad:
                    ga = _mm64(g, np.swapaxes(b.data, -1, -2))
                    a._accum(_unbroadcast(ga, a.shape), "matmul")
                if b.requires_grad:
                    gb = _mm64(np.swapaxes(a.data, -1, -2), g)
                    b._accum(_unbroadcast(gb, b.shape), "matmul")

            out._backward_fn = backward
        return out

    # ---- shape ops -------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._result(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            a = self
            out._backward_fn = lambda g: a._accum(g.reshape(a.shape), "reshape")
        return out

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        out = Tensor._result(np.transpose(self.data, axes), (self,), "transpose")
        if out.requires_grad:
            a = self
            inv = tuple(np.argsort(axes))
            out._backward_fn = lambda g: a._accum(np.transpose(g, inv), "transpose")
        return out

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        out = Tensor._result(np.swapaxes(self.data, ax1, ax2), (self,), "transpose")
        if out.requires_grad:
            a = self
            out._backward_fn = lambda g: a._accum(np.swapaxes(g, ax1, ax2), "transpose")
        return out

    def __getitem__(self, idx) -> "Tensor":
        out = Tensor._result(self.data[idx], (self,), "slice")
        if out.requires_grad:
            a = self

            def backward(g):
                full = np.zeros(a.shape, dtype=np.float32)
                np.add.at(full, idx, g)
                a._accum(full, "slice")

            out._backward_fn = backward
        return out

    # ---- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = np.sum(self.data, axis=axis, keepdims=keepdims, dtype=np.float64)
        out = Tensor._result(np.asarray(data, dtype=np.float32), (self,), "sum")
        if out.requires_grad:
            a = self
            ax = axis

            def backward(g):
                gg = np.asarray(g)
                if ax is not None and not keepdims:
                    gg = np.expand_dims(gg, ax)
                a._accum(np.broadcast_to(gg, a.shape).copy(), "sum")

            out._backward_fn = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        data = np.mean(self.data, axis=axis, keepdims=keepdims, dtype=np.float64)
        out = Tensor._result(np.asarray(data, dtype=np.float32), (self,), "mean")
        if out.requires_grad:
            a = self
            ax = axis

            def backward(g):
                gg = np.asarray(g) / np.float32(n)
                if ax is not None and not keepdims:
                    gg = np.expand_dims(gg, ax)
                a._accum(np.broadcast_to(gg, a.shape).astype(np.float32), "mean")

            out._backward_fn = backward
        return out

    # ---- nonlinearities ----------------------------------------------------------

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = Tensor._result(y, (self,), "sigmoid")
        if out.requires_grad:
            a = self
            out._backward_fn = lambda g: a._accum(g * y * (1.0 - y), "sigmoid")
        return out

    def gelu(self) -> "Tensor":
        # tanh approximation
        x = self.data
        c = np.float32(np.sqrt(2.0 / np.pi))
        x2 = x * x
        t = np.tanh(c * (x + np.float32(0.044715) * x2 * x))
        y = 0.5 * x * (1.0 + t)
        out = Tensor._result(y, (self,), "gelu")
        if out.requires_grad:
            a = self

            def backward(g):
                dinner = c * (1.0 + np.float32(3 * 0.044715) * x2)
                dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
                a._accum(g * dy, "gelu")

            out._backward_fn = backward
        return out

    def softmax(self, axis: int = -1) -> "Tensor":
        x = self.data
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / np.sum(e, axis=axis, keepdims=True)
        out = Tensor._result(y.astype(np.float32), (self,), "softmax")
        if out.requires_grad:
            a = self

            def backward(g):
                dot = np.sum(g * y, axis=axis, keepdims=True)
                a._accum((g - dot) * y, "softmax")

            out._backward_fn = backward
        return out

    def sin(self) -> "Tensor":
        out = Tensor._result(np.sin(self.data), (self,), "sin")
        if out.requires_grad:
            a = self
            cosx = np.cos(a.data)
            out._backward_fn = lambda g: a._accum(g * cosx, "sin")
        return out

    def cos(self) -> "Tensor":
        out = Tensor._result(np.cos(self.data), (self,), "cos")
        if out.requires_grad:
            a = self
            sinx = np.sin(a.data)
            out._backward_fn = lambda g: a._accum(-g * sinx, "cos")
        return out

    # ---- backward ----------------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise ContractViolation("backward on a tensor that is not part of a gradient graph")
        if seed is None:
            if self.data.size != 1:
                raise ContractViolation(
                    "backward on non-scalar output requires an explicit seed gradient"
                )
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.asarray(seed, dtype=np.float32)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [Tensor._ensure(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat of empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(
            f"concat axis {axis}: {[t.shape for t in tensors]}"
        ) from e
    out = Tensor._result(data, tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]

        def backward(g):
            splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
            for t, gs in zip(tensors, splits):
                if t.requires_grad:
                    t._accum(np.ascontiguousarray(gs), "concat")

        out._backward_fn = backward
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable scale/shift."""
    xd = x.data
    if gamma.shape != (xd.shape[-1],) or beta.shape != (xd.shape[-1],):
        raise ShapeMismatch(
            f"layer_norm affine params {gamma.shape}/{beta.shape} vs feature dim {xd.shape[-1]}"
        )
    mu = np.mean(xd, axis=-1, keepdims=True, dtype=np.float64)
    diff = xd.astype(np.float64) - mu
    var = np.mean(diff * diff, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (diff * inv).astype(np.float32)
    y = gamma.data * xhat + beta.data
    out = Tensor._result(y.astype(np.float32), (x, gamma, beta), "layer_norm")
    if out.requires_grad:
        n = xd.shape[-1]

        def backward(g):
            if gamma.requires_grad:
                gamma._accum(
                    np.sum(g * xhat, axis=tuple(range(g.ndim - 1))), "layer_norm"
                )
            if beta.requires_grad:
                beta._accum(np.sum(g, axis=tuple(range(g.ndim - 1))), "layer_norm")
            if x.requires_grad:
                gx = (g * gamma.data).astype(np.float64)
                gsum = np.sum(gx, axis=-1, keepdims=True)
                gxhat = np.sum(gx * xhat, axis=-1, keepdims=True)
                dx = inv * (gx - gsum / n - xhat * gxhat / n)
                x._accum(dx.astype(np.float32), "layer_norm")

        out._backward_fn = backward
    return out


def tanh(x: Tensor) -> Tensor:
    # composed from sigmoid so the primitive set stays small
    return 2.0 * (2.0 * x).sigmoid() - 1.0


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """One backward pass; returns gradients aligned with `params`.

    Parameters that do not influence the loss get zero gradients.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss.backward()
    out = []
    for p in params:
        if not p.requires_grad:
            raise ContractViolation("grad requested for a tensor with requires_grad=False")
        out.append(p.grad if p.grad is not None else np.zeros_like(p.data))
    return out
