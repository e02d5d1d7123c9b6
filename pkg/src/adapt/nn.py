"""Differentiable building blocks composed from autodiff primitives."""

from __future__ import annotations

import numpy as np

from .autodiff import DTYPE, Tensor, as_tensor, matmul, unfold1d, unfold2d

_GELU_C = float(np.sqrt(2.0 / np.pi))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b), broadcasting over any leading batch dims."""
    out = matmul(x, w)
    return out if b is None else out + b


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere, cheap exact gradient
    inner = (x + (x * x * x) * 0.044715) * _GELU_C
    return x * (inner.tanh() + 1.0) * 0.5


def gelu_np(x: np.ndarray) -> np.ndarray:
    return x * (np.tanh((x + 0.044715 * x**3) * _GELU_C) + 1.0) * 0.5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis. Zero rows map to ``bias`` (finite, no NaN)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * ((var + eps) ** -0.5) * gain + bias


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-sum-exp; the max shift is a detached constant."""
    mx = x.data.max(axis=axis, keepdims=True)
    z = (x - Tensor(mx)).exp().sum(axis=axis).log()
    return z + Tensor(np.squeeze(mx, axis=axis))


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of (..., d) to unit L2 norm; zero rows are an error."""
    sq = (x * x).sum(axis=-1, keepdims=True)
    if np.any(sq.data <= eps):
        raise ValueError("zero-norm embedding row: cannot normalize")
    return x * (sq**-0.5)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """(B, d) x (B, d) -> (B, B) matrix of pairwise row cosine similarities."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"cosine_matrix needs matching (B, d) inputs, got {a.shape} and {b.shape}")
    return matmul(l2_normalize_rows(a), l2_normalize_rows(b).T)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """(B, C, L) * (F, C, K) -> (B, F, L_out), valid padding."""
    B = x.shape[0]
    f, c, k = w.shape
    cols = unfold1d(x, k, stride)  # (B, L_out, C*K)
    l_out = cols.shape[1]
    y = matmul(cols.reshape((B * l_out, c * k)), w.reshape((f, c * k)).T) + b
    return y.reshape((B, l_out, f)).swapaxes(1, 2)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """(B, C, H, W) * (F, C, K, K) -> (B, F, H_out, W_out), valid padding."""
    B, _, h, wd = x.shape
    f, c, k, _ = w.shape
    cols = unfold2d(x, k, stride)  # (B, Ho*Wo, C*K*K)
    n_pos = cols.shape[1]
    h_out = (h - k) // stride + 1
    w_out = (wd - k) // stride + 1
    y = matmul(cols.reshape((B * n_pos, c * k * k)), w.reshape((f, c * k * k)).T) + b
    return y.reshape((B, h_out, w_out, f)).transpose((0, 3, 1, 2))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis (inference paths)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=DTYPE)
    out[np.arange(len(labels)), labels] = 1.0
    return out
