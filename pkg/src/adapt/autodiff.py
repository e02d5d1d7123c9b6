"""Reverse-mode autodiff over dense float64 numpy arrays.

Matrices and vectors are plain ``np.ndarray`` values (row/column indexed)
wrapped in :class:`Tensor` nodes when gradients are needed. The op set is
exactly what the training pipeline composes: elementwise arithmetic,
matmul, reductions, reshapes, gather/concat, sliding-window unfolds for
convolutions, and a row-wise masked softmax. Gradients are validated
against central finite differences via :func:`grad_check`.

Conventions:
  - computation is float64 end to end (verification precision),
  - gradient arrays are never mutated in place (aliasing-safe accumulation),
  - constants (``requires_grad=False`` and no parents) are pruned from the
    tape, so frozen sub-models add no backward cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


def _accum(t: "Tensor", g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A node in the reverse-mode computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output, accumulating into ``.grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        a, b = self, as_tensor(other)
        out_data = a.data + b.data
        if not (a.requires_grad or b.requires_grad):
            return Tensor(out_data)

        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))

        return Tensor(out_data, True, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        if not self.requires_grad:
            return Tensor(-self.data)
        return Tensor(-self.data, True, (self,), lambda g: _accum(self, -g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        a, b = self, as_tensor(other)
        out_data = a.data * b.data
        if not (a.requires_grad or b.requires_grad):
            return Tensor(out_data)

        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return Tensor(out_data, True, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        return self * (as_tensor(other) ** -1.0)

    def __pow__(self, exponent: float):
        p = float(exponent)
        out_data = self.data**p
        if not self.requires_grad:
            return Tensor(out_data)

        def bw(g):
            _accum(self, g * p * self.data ** (p - 1.0))

        return Tensor(out_data, True, (self,), bw)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise functions -------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        if not self.requires_grad:
            return Tensor(out_data)
        return Tensor(out_data, True, (self,), lambda g: _accum(self, g * out_data))

    def log(self):
        out_data = np.log(self.data)
        if not self.requires_grad:
            return Tensor(out_data)
        return Tensor(out_data, True, (self,), lambda g: _accum(self, g / self.data))

    def tanh(self):
        out_data = np.tanh(self.data)
        if not self.requires_grad:
            return Tensor(out_data)
        return Tensor(out_data, True, (self,), lambda g: _accum(self, g * (1.0 - out_data**2)))

    # -- reductions and shape ops ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        if not self.requires_grad:
            return Tensor(out_data)
        src_shape = self.data.shape

        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            _accum(self, np.broadcast_to(gg, src_shape))

        return Tensor(out_data, True, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape):
        out_data = self.data.reshape(shape)
        if not self.requires_grad:
            return Tensor(out_data)
        src_shape = self.data.shape
        return Tensor(out_data, True, (self,), lambda g: _accum(self, g.reshape(src_shape)))

    def transpose(self, axes):
        out_data = np.transpose(self.data, axes)
        if not self.requires_grad:
            return Tensor(out_data)
        inv = tuple(np.argsort(axes))
        return Tensor(out_data, True, (self,), lambda g: _accum(self, np.transpose(g, inv)))

    def swapaxes(self, a: int, b: int):
        out_data = np.swapaxes(self.data, a, b)
        if not self.requires_grad:
            return Tensor(out_data)
        return Tensor(out_data, True, (self,), lambda g: _accum(self, np.swapaxes(g, a, b)))

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError(f".T needs a 2-D tensor, got shape {self.data.shape}")
        return self.transpose((1, 0))

    def __getitem__(self, idx):
        out_data = self.data[idx]
        if not self.requires_grad:
            return Tensor(out_data)
        src_shape = self.data.shape

        def bw(g):
            z = np.zeros(src_shape, dtype=DTYPE)
            np.add.at(z, idx, g)
            _accum(self, z)

        return Tensor(out_data, True, (self,), bw)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- primitives beyond Tensor methods ---------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics (batch dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out_data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return Tensor(out_data, True, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    if not any(t.requires_grad for t in ts):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                _accum(t, piece)

    return Tensor(out_data, True, tuple(ts), bw)


def _masked_softmax_data(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    mb = np.broadcast_to(m, x.shape)
    shifted = np.where(mb > 0, x, -np.inf)
    mx = shifted.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)  # all-masked rows: any finite shift works
    e = np.exp(shifted - mx)  # exp(-inf) == 0 keeps masked entries exact zeros
    s = e.sum(axis=-1, keepdims=True)
    return np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)


def masked_softmax(scores, mask) -> Tensor | np.ndarray:
    """Softmax over the last axis restricted to ``mask == 1`` entries.

    Masked entries are exactly zero in the output; an all-zero mask row
    yields an all-zero output row (defined, non-error). The mask is a
    constant: no gradient flows into it.
    """
    m = np.asarray(mask, dtype=DTYPE)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mask entries must be 0 or 1")
    if isinstance(scores, Tensor):
        x = scores
        if m.shape[-1] != x.data.shape[-1]:
            raise ShapeError(f"mask length {m.shape} incompatible with scores {x.data.shape}")
        out_data = _masked_softmax_data(x.data, m)
        if not x.requires_grad:
            return Tensor(out_data)

        def bw(g):
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            _accum(x, out_data * (g - dot))

        return Tensor(out_data, True, (x,), bw)
    x = np.asarray(scores, dtype=DTYPE)
    if x.shape != m.shape and m.shape[-1] != x.shape[-1]:
        raise ShapeError(f"mask shape {m.shape} incompatible with scores {x.shape}")
    return _masked_softmax_data(x, m)


def unfold1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """(B, C, L) -> (B, L_out, C*kernel) sliding windows for conv-as-matmul."""
    x = as_tensor(x)
    B, C, L = x.data.shape
    if L < kernel:
        raise ShapeError(f"sequence length {L} shorter than kernel {kernel}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=2)[:, :, ::stride, :]
    l_out = win.shape[2]
    out_data = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B, l_out, C * kernel)
    if not x.requires_grad:
        return Tensor(out_data)

    def bw(g):
        gk = g.reshape(B, l_out, C, kernel)
        z = np.zeros((B, C, L), dtype=DTYPE)
        for k in range(kernel):
            z[:, :, k : k + stride * (l_out - 1) + 1 : stride] += gk[:, :, :, k].transpose(0, 2, 1)
        _accum(x, z)

    return Tensor(out_data, True, (x,), bw)


def unfold2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """(B, C, H, W) -> (B, H_out*W_out, C*kernel^2) sliding windows."""
    x = as_tensor(x)
    B, C, H, W = x.data.shape
    if H < kernel or W < kernel:
        raise ShapeError(f"grid {H}x{W} smaller than kernel {kernel}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    h_out, w_out = win.shape[2], win.shape[3]
    out_data = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B, h_out * w_out, C * kernel * kernel
    )
    if not x.requires_grad:
        return Tensor(out_data)

    def bw(g):
        gk = g.reshape(B, h_out, w_out, C, kernel, kernel)
        z = np.zeros((B, C, H, W), dtype=DTYPE)
        for ki in range(kernel):
            for kj in range(kernel):
                z[
                    :,
                    :,
                    ki : ki + stride * (h_out - 1) + 1 : stride,
                    kj : kj + stride * (w_out - 1) + 1 : stride,
                ] += gk[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        _accum(x, z)

    return Tensor(out_data, True, (x,), bw)


# -- plain-array numerics -----------------------------------------------------


def cosine(u, v) -> float:
    """Cosine similarity of two equal-length vectors; zero-norm inputs are an error."""
    u = np.asarray(u, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"cosine needs equal-length vectors, got {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


# -- gradient checking --------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: list[Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must rebuild its graph on every call (it is re-evaluated 2N times
    for N parameter entries). Relative error uses max(|analytic|, |numeric|)
    as denominator, floored at 1e-6 so noise on near-zero entries does not
    dominate.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f(params)
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: function value is not finite")
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    max_rel = 0.0
    n = 0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(params).data)
            flat[i] = orig - step
            fm = float(f(params).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            denom = max(abs(num), abs(ana_flat[i]), 1e-6)
            max_rel = max(max_rel, abs(num - ana_flat[i]) / denom)
            n += 1
    return GradCheckReport(max_rel_error=max_rel, tol=tol, n_entries=n)
