"""Logistic loss, softmax Jacobian, and closed-form gradients for W_Q, W_K, W_V.

With ``v_n = X_n W_V w_O``, ``phi_{n,i}`` the i-th attention row of sample n,
``J = diag(phi) - phi phi^T`` and ``c_n = y_n l'(y_n f(X_n)) / (N M)``:

    grad W_Q = sum_n c_n sum_i x_{n,i} (J_{n,i} v_n)^T X_n W_K
    grad W_K = sum_n c_n sum_i X_n^T (J_{n,i} v_n) x_{n,i}^T W_Q
    grad W_V = sum_n c_n (sum_l phi_{n,l} X_n)^T w_O^T

w_O is frozen and never receives a gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import Dataset
from .model import ModelParams, attention_rows, forward, token_values


@dataclass(frozen=True)
class GradientSet:
    g_WQ: np.ndarray
    g_WK: np.ndarray
    g_WV: np.ndarray

    def as_tuple(self):
        return self.g_WQ, self.g_WK, self.g_WV

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.as_tuple())


def logistic_loss(z):
    """``log(1 + exp(-z))``, branching on sign so neither tail overflows."""
    z = np.asarray(z, dtype=np.float64)
    out = np.where(z > 0, np.log1p(np.exp(-np.abs(z))), -z + np.log1p(np.exp(-np.abs(z))))
    return float(out) if out.ndim == 0 else out


def loss_derivative(z):
    """``l'(z) = -1 / (1 + exp(z))``, always in (-1, 0)."""
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    out = np.where(z >= 0, -ez / (1.0 + ez), -1.0 / (1.0 + ez))
    return float(out) if out.ndim == 0 else out


def softmax_jacobian(phi) -> np.ndarray:
    """``diag(phi) - phi phi^T``; works on a single row or stacked rows (..., M)."""
    phi = np.asarray(phi, dtype=np.float64)
    eye = np.eye(phi.shape[-1])
    return phi[..., :, None] * eye - phi[..., :, None] * phi[..., None, :]


def margins(params: ModelParams, data: Dataset) -> np.ndarray:
    return data.y * forward(params, data.X)


def empirical_loss(params: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("empirical loss of an empty dataset is undefined")
    return float(np.mean(logistic_loss(margins(params, data))))


def analytic_gradients(params: ModelParams, data: Dataset) -> GradientSet:
    return loss_and_gradients(params, data)[1]


def loss_and_gradients(params: ModelParams, data: Dataset):
    """``(empirical_loss, GradientSet)`` sharing one forward pass."""
    X = np.asarray(data.X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != params.W_Q.shape[0]:
        raise ValueError(f"data shape {X.shape} incompatible with d={params.W_Q.shape[0]}")
    N, M, _ = X.shape
    A = attention_rows(params, X)                     # (N, M, M)
    v = token_values(params, X)                       # (N, M)
    f = np.einsum("nlj,nj->n", A, v) / M
    c = data.y * loss_derivative(data.y * f) / (N * M)
    # U[n, i, :] = J_{n,i} v_n = phi * v - phi (phi . v)
    U = A * v[:, None, :] - A * np.einsum("nij,nj->ni", A, v)[:, :, None]
    XK = X @ params.W_K
    XQ = X @ params.W_Q
    g_WQ = np.einsum("n,nid,nij,nje->de", c, X, U, XK, optimize=True)
    g_WK = np.einsum("n,njd,nij,nie->de", c, X, U, XQ, optimize=True)
    pooled = np.einsum("nlj,njd->nd", A, X)           # sum_l phi_{n,l} X_n
    g_WV = np.outer(c @ pooled, params.w_O)
    loss = float(np.mean(logistic_loss(data.y * f)))
    return loss, GradientSet(g_WQ, g_WK, g_WV)


def finite_difference_gradients(params: ModelParams, data: Dataset, h: float = 1e-3) -> GradientSet:
    """Fourth-order central differences of the empirical loss, step ``h * (1 + |entry|)``.

    The five-point stencil keeps both truncation (O(h^4)) and cancellation
    (O(eps / h)) near 1e-13, so entries several decades below the largest one
    are still resolved to better than 1e-6 relative.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grads = []
    for name in ("W_Q", "W_K", "W_V"):
        W = getattr(params, name)
        G = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            step = h * (1.0 + abs(W[idx]))
            vals = []
            for k in (2, 1, -1, -2):
                Wk = W.copy()
                Wk[idx] += k * step
                vals.append(empirical_loss(params.replace(**{name: Wk}), data))
            G[idx] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
        grads.append(G)
    return GradientSet(*grads)


def max_relative_error(a: GradientSet, b: GradientSet, floor: float = 1e-7) -> float:
    """Largest entrywise ``|a - b| / max(|a|, |b|, floor)`` over all three matrices.

    ``floor`` only matters for entries that are exactly zero by structure (a
    signal row when its class is absent), where FD returns ~1e-14 noise.
    """
    worst = 0.0
    for x, y in zip(a.as_tuple(), b.as_tuple()):
        scale = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / scale)))
    return worst
