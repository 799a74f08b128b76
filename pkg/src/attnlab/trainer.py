"""Full-batch gradient descent on the empirical logistic loss."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .data_model import Dataset
from .loss_grad import analytic_gradients, empirical_loss, loss_and_gradients
from .model import ModelParams


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good_step, last_good_params=None):
        super().__init__(message)
        self.last_good_step = last_good_step
        self.last_good_params = last_good_params


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.1
    epsilon: float = 0.01
    max_steps: int = 200_000
    snapshot_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not (self.eta > 0 and self.epsilon > 0):
            raise ValueError("eta and epsilon must be positive")
        if self.max_steps < 1 or self.snapshot_every < 1:
            raise ValueError("max_steps and snapshot_every must be >= 1")


@dataclass
class TrainResult:
    final_params: ModelParams
    steps_taken: int
    converged: bool
    terminal_train_loss: float
    train_loss_trace: list = field(default_factory=list)


def gd_step(params: ModelParams, data: Dataset, eta: float, grads=None) -> ModelParams:
    """One step ``W <- W - eta * grad`` for W_Q, W_K, W_V; w_O is left untouched."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    g = analytic_gradients(params, data) if grads is None else grads
    if not g.is_finite():
        raise TrainingDiverged("non-finite gradient", last_good_step=None, last_good_params=params)
    return ModelParams(params.W_Q - eta * g.g_WQ, params.W_K - eta * g.g_WK,
                       params.W_V - eta * g.g_WV, params.w_O, params.dims)


class LossTraceWriter:
    """Streams ``step,train_loss`` rows so an aborted run still leaves a usable trace."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(["step", "train_loss"])
        self._fh.flush()

    def __call__(self, step, loss):
        self._w.writerow([step, repr(float(loss))])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def train(params: ModelParams, data: Dataset, cfg: TrainConfig, hook=None, trace_writer=None) -> TrainResult:
    """Run GD until the training loss is <= epsilon or ``max_steps`` is reached.

    ``hook(step, params, loss)`` is called every ``snapshot_every`` steps and at
    the final step; params handed to it are never mutated afterwards.
    """
    trace = []
    step = 0
    loss, grads = loss_and_gradients(params, data)

    def record(s, l, p):
        trace.append((s, l))
        if trace_writer is not None:
            trace_writer(s, l)
        if hook is not None:
            hook(s, p, l)

    record(0, loss, params)
    while loss > cfg.epsilon and step < cfg.max_steps:
        try:
            params = gd_step(params, data, cfg.eta, grads)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"non-finite gradient at step {step}", step, params) from exc
        step += 1
        loss, grads = loss_and_gradients(params, data)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}", step - 1)
        if step % cfg.snapshot_every == 0:
            record(step, loss, params)
    if trace[-1][0] != step:
        record(step, loss, params)
    return TrainResult(params, step, loss <= cfg.epsilon, loss, trace)


def test_loss(params: ModelParams, test_data: Dataset) -> float:
    """Monte-Carlo population loss on fresh samples."""
    if len(test_data) == 0:
        raise ValueError("test set is empty")
    return empirical_loss(params, test_data)


# keep pytest from collecting this as a test
test_loss.__test__ = False
