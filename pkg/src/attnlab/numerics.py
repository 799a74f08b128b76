"""Numerical substrate: seeded Gaussian sampling, stable softmax, least squares.

The random stream is SplitMix64 in counter mode, so that any implementation
(in any language) given the same seed produces the same uniforms:

    x_i = mix64(seed + i * 0x9E3779B97F4A7C15)        i = 1, 2, ...
    mix64(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
              z = (z ^ (z >> 27)) * 0x94D049BB133111EB
              z ^ (z >> 31)

Uniforms are ``(x >> 11) * 2**-53`` in [0, 1).  Gaussians use Box-Muller on
consecutive pairs ``(u1, u2)``::

    r = sqrt(-2 log(1 - u1));  g1 = r cos(2 pi u2);  g2 = r sin(2 pi u2)

Child streams are keyed: ``split(key)`` hashes the parent seed with a string
key, so children never depend on how many draws the parent already made.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream.

    Single-owner: give parallel workers their own ``split`` children.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * GOLDEN_GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        bits = self.next_u64(n) >> np.uint64(11)
        return bits.astype(np.float64) * (2.0 ** -53)

    def standard_normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        out = np.empty((m, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]

    def rademacher(self, n: int) -> np.ndarray:
        """Signs in {-1, +1} from the top bit of each draw."""
        top = self.next_u64(n) >> np.uint64(63)
        return np.where(top == 1, 1, -1).astype(np.int64)

    def split(self, key) -> "Rng":
        """Independent child stream for ``key`` (any value with a stable ``repr``)."""
        h = hashlib.sha256(f"{self.seed}:{key!r}".encode()).digest()
        return Rng(int.from_bytes(h[:8], "little"))


def as_rng(seed_or_rng) -> Rng:
    if isinstance(seed_or_rng, Rng):
        return seed_or_rng
    return Rng(seed_or_rng)


def gaussian_matrix(rng: Rng, rows: int, cols: int, std: float) -> np.ndarray:
    """``rows x cols`` matrix with i.i.d. N(0, std^2) entries, row-major fill order."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return np.zeros((rows, cols))
    return std * rng.standard_normal(rows * cols).reshape(rows, cols)


def stable_softmax(logits, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction; works along ``axis`` of any array."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise ValueError("softmax needs at least one token (got an empty logit vector)")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def least_squares(basis, target, ridge: float = 0.0):
    """Coefficients ``c`` minimising ``||sum_i c_i b_i - target||^2 + ridge ||c||^2``.

    Returns ``(c, residual_norm)`` where the residual is recomputed for the
    returned ``c`` (the ridge penalty is not included in it).
    """
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    t = np.asarray(target, dtype=np.float64)
    B = np.asarray(basis, dtype=np.float64)
    if B.ndim == 1:
        B = B[None, :]
    if B.shape[0] == 0:
        return np.zeros(0), float(np.linalg.norm(t))
    if B.shape[1] != t.shape[0]:
        raise ValueError(f"basis vectors have length {B.shape[1]}, target has {t.shape[0]}")
    A = B.T  # columns are basis vectors
    if ridge > 0:
        k = A.shape[1]
        A_aug = np.vstack([A, math.sqrt(ridge) * np.eye(k)])
        t_aug = np.concatenate([t, np.zeros(k)])
        c = np.linalg.lstsq(A_aug, t_aug, rcond=None)[0]
    else:
        c = np.linalg.lstsq(A, t, rcond=None)[0]
    return c, float(np.linalg.norm(A @ c - t))
