"""Signal/noise token data: one signal token plus M-1 projected Gaussian noise tokens."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import Rng, as_rng


def make_signals(d: int, mu_norm: float):
    """Axis-aligned signal pair ``(mu_norm * e1, mu_norm * e2)``."""
    if d < 2:
        raise ValueError(f"need d >= 2 to host two orthogonal signals, got d={d}")
    if mu_norm <= 0:
        raise ValueError("mu_norm must be positive")
    mu_plus = np.zeros(d)
    mu_minus = np.zeros(d)
    mu_plus[0] = mu_norm
    mu_minus[1] = mu_norm
    return mu_plus, mu_minus


@dataclass(frozen=True)
class DataModelParams:
    d: int
    M: int
    mu_norm: float
    sigma_p: float
    cp: float | None = None  # None -> 5 sqrt(M)
    project_noise: bool = True

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2 (one signal token plus at least one noise token)")
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.mu_norm <= 0 or self.sigma_p <= 0:
            raise ValueError("mu_norm and sigma_p must be positive")
        if self.cp is None:
            object.__setattr__(self, "cp", 5.0 * math.sqrt(self.M))
        if self.cp <= 0:
            raise ValueError("cp must be positive")

    @property
    def sigma_p_tilde(self) -> float:
        return self.cp * self.sigma_p

    @property
    def signals(self):
        return make_signals(self.d, self.mu_norm)

    @property
    def mu_plus(self) -> np.ndarray:
        return self.signals[0]

    @property
    def mu_minus(self) -> np.ndarray:
        return self.signals[1]

    def to_dict(self) -> dict:
        return asdict(self)


def snr(params: DataModelParams) -> float:
    return params.mu_norm / (params.sigma_p * math.sqrt(params.d))


def mu_norm_for_snr(value: float, sigma_p: float, d: int) -> float:
    return value * sigma_p * math.sqrt(d)


def _project_out(z: np.ndarray, mu_plus: np.ndarray, mu_minus: np.ndarray) -> np.ndarray:
    # Gram-Schmidt removal along the last axis; the signals are orthogonal.
    for mu in (mu_plus, mu_minus):
        u = mu / np.linalg.norm(mu)
        z = z - (z @ u)[..., None] * u
    return z


def sample_noise(params: DataModelParams, rng: Rng, std: float, count: int | None = None) -> np.ndarray:
    """One noise vector (or ``count`` of them) orthogonal to both signals."""
    if std <= 0:
        raise ValueError("noise std must be positive")
    n = 1 if count is None else count
    z = std * rng.standard_normal(n * params.d).reshape(n, params.d)
    if params.project_noise:
        mu_plus, mu_minus = params.signals
        z = _project_out(z, mu_plus, mu_minus)
    return z[0] if count is None else z


@dataclass
class Dataset:
    """``X`` has shape (N, M, d); ``y`` has shape (N,) with entries in {-1, +1}."""

    X: np.ndarray
    y: np.ndarray
    params: DataModelParams
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def pos(self) -> np.ndarray:
        return np.flatnonzero(self.y == 1)

    @property
    def neg(self) -> np.ndarray:
        return np.flatnonzero(self.y == -1)

    def subset(self, idx) -> "Dataset":
        idx = np.atleast_1d(idx)
        return Dataset(self.X[idx], self.y[idx], self.params, self.seed, dict(self.meta))


def generate_dataset(N: int, params: DataModelParams, rng) -> Dataset:
    """Draw ``N`` labelled samples.

    Labels come from their own child stream before any noise is drawn, and each
    sample's noise comes from a per-index child, so the noise is identical
    across label outcomes for a fixed seed.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = as_rng(rng)
    y = rng.split("labels").rademacher(N)
    mu_plus, mu_minus = params.signals
    X = np.empty((N, params.M, params.d))
    for n in range(N):
        child = rng.split(("noise", n))
        X[n, 0] = mu_plus if y[n] == 1 else mu_minus
        X[n, 1] = sample_noise(params, child, params.sigma_p_tilde)
        if params.M > 2:
            X[n, 2:] = sample_noise(params, child, params.sigma_p, count=params.M - 2)
    meta = {}
    if np.all(y == y[0]) and N > 1:
        meta["single_class"] = True
    return Dataset(X, y, params, seed=rng.seed, meta=meta)


def save_dataset(path, data: Dataset) -> None:
    """Write a regeneration record (seed, params, N); samples are not stored."""
    if data.seed is None:
        raise ValueError("dataset has no seed; cannot write a regeneration record")
    record = {"format": "attnlab-dataset", "version": 1, "seed": data.seed,
              "N": data.N, "params": data.params.to_dict()}
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format") != "attnlab-dataset":
        raise ValueError(f"{path}: not an attnlab dataset record")
    if record.get("version") != 1:
        raise ValueError(f"{path}: unsupported dataset record version {record.get('version')}")
    params = DataModelParams(**record["params"])
    return generate_dataset(record["N"], params, Rng(record["seed"]))
