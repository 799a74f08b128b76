"""Two-layer transformer: one softmax self-attention layer and a frozen linear read-out.

    f(X) = (1/M) * sum_l softmax(x_l^T W_Q W_K^T X^T) X W_V w_O

There is no 1/sqrt(d_h) logit scaling.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, replace

import numpy as np

from .numerics import Rng, gaussian_matrix, stable_softmax

W_O_MODES = ("constant-normalized", "unit-uniform")
CHECKPOINT_VERSION = 1


def default_init_std(d: int) -> float:
    """Std of PyTorch's default ``nn.Linear`` init for fan-in ``d``, divided by 16."""
    return 1.0 / (16.0 * math.sqrt(3.0 * d))


@dataclass(frozen=True)
class InitConfig:
    sigma_h: float
    sigma_v: float
    w_o_mode: str = "constant-normalized"
    seed: int = 0

    def __post_init__(self):
        if self.sigma_h < 0 or self.sigma_v < 0:
            raise ValueError("initialization stds must be >= 0")
        if self.w_o_mode not in W_O_MODES:
            raise ValueError(f"unknown w_o_mode {self.w_o_mode!r}; expected one of {W_O_MODES}")


@dataclass(frozen=True)
class Dims:
    d: int
    d_h: int
    d_v: int
    M: int

    def __post_init__(self):
        if min(self.d, self.d_h, self.d_v) < 1:
            raise ValueError("dimensions must be positive")
        if self.M < 2:
            raise ValueError("M must be >= 2")


@dataclass(frozen=True)
class ModelParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    w_O: np.ndarray
    dims: Dims

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def copy(self) -> "ModelParams":
        return ModelParams(self.W_Q.copy(), self.W_K.copy(), self.W_V.copy(), self.w_O.copy(), self.dims)

    @property
    def value_direction(self) -> np.ndarray:
        """``W_V w_O``: the d-vector every token is projected on by the value path."""
        return self.W_V @ self.w_O


def init_model(cfg: InitConfig, dims: Dims) -> ModelParams:
    rng = Rng(cfg.seed)
    W_Q = gaussian_matrix(rng.split("W_Q"), dims.d, dims.d_h, cfg.sigma_h)
    W_K = gaussian_matrix(rng.split("W_K"), dims.d, dims.d_h, cfg.sigma_h)
    W_V = gaussian_matrix(rng.split("W_V"), dims.d, dims.d_v, cfg.sigma_v)
    if cfg.w_o_mode == "constant-normalized":
        w_O = np.full(dims.d_v, 1.0 / math.sqrt(dims.d_v))
    else:
        w = rng.split("w_O").standard_normal(dims.d_v)
        w_O = w / np.linalg.norm(w)
    return ModelParams(W_Q, W_K, W_V, w_O, dims)


def _check_tokens(params: ModelParams, X: np.ndarray):
    if X.shape[-1] != params.W_Q.shape[0]:
        raise ValueError(f"token dimension {X.shape[-1]} does not match model d={params.W_Q.shape[0]}")
    if X.shape[-2] < 2:
        raise ValueError("need at least two tokens per sample")


def attention_logits(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """``X W_Q W_K^T X^T`` for one sample (M, d) or a batch (N, M, d)."""
    X = np.asarray(X, dtype=np.float64)
    _check_tokens(params, X)
    Q = X @ params.W_Q
    K = X @ params.W_K
    return Q @ np.swapaxes(K, -1, -2)


def attention_rows(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Row-stochastic attention matrix; row l is the softmax for query token l."""
    return stable_softmax(attention_logits(params, X), axis=-1)


def token_values(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Scalar value ``x_i^T W_V w_O`` of every token."""
    return np.asarray(X, dtype=np.float64) @ params.value_direction


def forward(params: ModelParams, X: np.ndarray):
    """Network output for one sample (scalar) or a batch (vector of length N)."""
    A = attention_rows(params, X)
    v = token_values(params, X)
    out = np.einsum("...lj,...j->...", A, v) / A.shape[-1]
    return float(out) if np.ndim(out) == 0 else out


def save_checkpoint(path, params: ModelParams, init: InitConfig | None = None, step: int = 0) -> None:
    header = {"format": "attnlab-checkpoint", "version": CHECKPOINT_VERSION,
              "dims": asdict(params.dims), "init": asdict(init) if init else None, "step": step}
    arrays = {"header": np.array(json.dumps(header, sort_keys=True)),
              "W_Q": params.W_Q, "W_K": params.W_K, "W_V": params.W_V, "w_O": params.w_O}
    # np.savez stamps the wall clock into the zip; a fixed date keeps reruns byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path):
    """Returns ``(params, header)``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "attnlab-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint header {header}")
        params = ModelParams(z["W_Q"], z["W_K"], z["W_V"], z["w_O"], Dims(**header["dims"]))
    return params, header
