"""Experiment drivers: the (N, SNR) sweep, QKV dynamics runs, and init concentration checks."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import diagnostics as diag
from .data_model import DataModelParams, generate_dataset, mu_norm_for_snr
from .model import Dims, InitConfig, default_init_std, init_model
from .numerics import Rng
from .report import write_verdicts
from .trainer import TrainConfig, TrainingDiverged, gd_step, test_loss, train

# ---------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class SweepConfig:
    N_values: tuple
    snr_values: tuple
    d: int = 256
    M: int = 8
    d_h: int = 128
    d_v: int = 128
    sigma_p: float = 0.2
    cp: float | None = None
    project_noise: bool = True
    sigma_h: float | None = None   # None -> default_init_std(d)
    sigma_v: float | None = None
    w_o_mode: str = "constant-normalized"
    train: TrainConfig = TrainConfig(eta=0.1, epsilon=0.01, max_steps=20_000, snapshot_every=1000)
    test_samples: int = 100
    cutoff: float = 0.2
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "N_values", tuple(int(n) for n in self.N_values))
        object.__setattr__(self, "snr_values", tuple(float(s) for s in self.snr_values))
        if not self.N_values or not self.snr_values:
            raise ValueError("sweep grids must be nonempty")
        if min(self.N_values) < 1 or min(self.snr_values) <= 0:
            raise ValueError("N values must be >= 1 and SNR values > 0")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.test_samples < 1:
            raise ValueError("test_samples must be >= 1")

    def data_params(self, snr: float) -> DataModelParams:
        return DataModelParams(self.d, self.M, mu_norm_for_snr(snr, self.sigma_p, self.d), self.sigma_p,
                               self.cp, self.project_noise)

    def init_stds(self):
        s = default_init_std(self.d)
        return (s if self.sigma_h is None else self.sigma_h, s if self.sigma_v is None else self.sigma_v)


def geometric_snrs(lo: float = 0.16, hi: float = 15.6, count: int = 8) -> tuple:
    return tuple(float(x) for x in np.geomspace(lo, hi, count))


def desk_sweep_config(**overrides) -> SweepConfig:
    base = SweepConfig(N_values=tuple(range(2, 21, 2)), snr_values=geometric_snrs())
    return replace(base, **overrides)


def full_scale_sweep_config(**overrides) -> SweepConfig:
    base = SweepConfig(N_values=tuple(range(2, 21, 2)), snr_values=geometric_snrs(count=10),
                       d=1024, M=16, d_h=512, d_v=512)
    return replace(base, **overrides)


@dataclass
class SweepCell:
    N: int
    snr: float
    mu_norm: float
    train_loss: float
    test_loss: float
    steps: int
    converged: bool
    classification: str  # benign | harmful | failed
    seed: int = 0
    error: str = ""

    @property
    def n_snr2(self) -> float:
        return self.N * self.snr ** 2


def cell_rng(master_seed: int, N: int, snr: float) -> Rng:
    """Child stream keyed on the grid point's values, not its position in the grid."""
    return Rng(master_seed).split(("cell", int(N), float(snr)))


def run_cell(cfg: SweepConfig, N: int, snr: float) -> SweepCell:
    rng = cell_rng(cfg.master_seed, N, snr)
    p = cfg.data_params(snr)
    tr = generate_dataset(N, p, rng.split("train"))
    te = generate_dataset(cfg.test_samples, p, rng.split("test"))
    sh, sv = cfg.init_stds()
    params = init_model(InitConfig(sh, sv, cfg.w_o_mode, seed=rng.split("init").seed), Dims(cfg.d, cfg.d_h, cfg.d_v, cfg.M))
    try:
        res = train(params, tr, cfg.train)
    except TrainingDiverged as exc:
        return SweepCell(N, snr, p.mu_norm, math.nan, math.nan, int(exc.last_good_step or 0), False,
                         "failed", rng.seed, str(exc))
    tl = test_loss(res.final_params, te)
    if not math.isfinite(tl):
        return SweepCell(N, snr, p.mu_norm, res.terminal_train_loss, tl, res.steps_taken, res.converged,
                         "failed", rng.seed, "non-finite test loss")
    cls = "benign" if tl < cfg.cutoff else "harmful"
    return SweepCell(N, snr, p.mu_norm, res.terminal_train_loss, tl, res.steps_taken, res.converged, cls, rng.seed)


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(cfg: SweepConfig, jobs: int | None = 1, progress=None) -> list:
    """All grid cells, ordered by (N index, snr index) whatever the pool schedule."""
    tasks = [(cfg, N, s) for N in cfg.N_values for s in cfg.snr_values]
    jobs = (os.cpu_count() or 1) if jobs is None else max(1, int(jobs))
    if jobs == 1:
        cells = []
        for t in tasks:
            cells.append(run_cell(*t))
            if progress:
                progress(cells[-1])
        return cells
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        cells = list(pool.map(_run_cell_args, tasks, chunksize=1))
    if progress:
        for c in cells:
            progress(c)
    return cells


def classify_boundary(cells):
    """Fit c in the rule ``N * snr^2 >= c  =>  benign``.

    Returns ``(c, accuracy)``.  Among thresholds with the best accuracy, the
    first (smallest) best interval of sorted N * snr^2 values is used and c is
    its geometric midpoint, which for separable grids lies in the empty margin.
    """
    pts = sorted((c.n_snr2, c.classification) for c in cells if c.classification in ("benign", "harmful"))
    n_b = sum(1 for _, k in pts if k == "benign")
    n_h = len(pts) - n_b
    if n_b < 2 or n_h < 2:
        raise ValueError(f"no boundary: need >= 2 cells of each class (benign={n_b}, harmful={n_h})")
    xs = [x for x, _ in pts]
    # threshold below index i: cells [i:] are predicted benign
    correct = n_b  # i = 0: all predicted benign
    best, best_i = correct, 0
    for i, (_, k) in enumerate(pts):
        correct += 1 if k == "harmful" else -1
        if i + 1 < len(pts) and xs[i + 1] == xs[i]:
            continue  # cannot split tied values
        if correct > best:
            best, best_i = correct, i + 1
    if best_i == 0:
        c = xs[0] / 2
    elif best_i == len(xs):
        c = xs[-1] * 2
    else:
        c = math.sqrt(xs[best_i - 1] * xs[best_i])
    return c, best / len(pts)


# ---------------------------------------------------------------------------
# dynamics

REGIMES = ("benign", "harmful")
DYNAMICS_SEED = 2024


@dataclass(frozen=True)
class DynamicsConfig:
    regime: str
    N: int
    mu_norm: float
    d: int = 2048
    M: int = 4
    d_h: int = 1024
    d_v: int = 256
    sigma_p: float = 0.05
    cp: float = 20.0  # sigma_p_tilde = 1
    eta: float = 0.01
    epsilon: float = 0.01
    max_steps: int = 100_000
    snapshot_every: int = 5
    seed: int = DYNAMICS_SEED
    sigma_h: float | None = None
    sigma_v: float | None = None
    full_decomposition: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")

    @property
    def data_params(self) -> DataModelParams:
        return DataModelParams(self.d, self.M, self.mu_norm, self.sigma_p, self.cp)

    @property
    def dims(self) -> Dims:
        return Dims(self.d, self.d_h, self.d_v, self.M)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.eta, self.epsilon, self.max_steps, self.snapshot_every, self.seed)


def dynamics_preset(regime: str, **overrides) -> DynamicsConfig:
    if regime == "benign":
        base = DynamicsConfig("benign", N=16, mu_norm=25.0)
    elif regime == "harmful":
        base = DynamicsConfig("harmful", N=10, mu_norm=15.0)
    else:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    return replace(base, **overrides)


@dataclass
class Verdict:
    name: str
    regime: str
    observed: float
    threshold: float
    passed: bool
    blocking: bool = False


@dataclass
class DynamicsResult:
    snapshots: list
    train_result: object
    verdicts: list
    test_loss: float
    data: object = None


def _series_nondecreasing_fraction(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 1.0
    return float(np.mean(np.diff(v) >= 0))


def dynamics_verdicts(cfg: DynamicsConfig, snapshots, result, tl) -> list:
    first, last = snapshots[0].summary, snapshots[-1].summary
    r = cfg.regime
    out = []
    if r == "benign":
        out.append(Verdict("attn_signal_minus_noise2", r, last["attn_signal_mean"] - last["attn_noise2_mean"], 0.0,
                           last["attn_signal_mean"] > last["attn_noise2_mean"], True))
        ratio = last["V_plus"] / last["V_noise_absmax"]
        out.append(Verdict("V_plus_over_max_V_noise", r, ratio, 3.0, ratio > 3.0, True))
        frac = _series_nondecreasing_fraction([s.summary["qk_sig_sig"] for s in snapshots])
        out.append(Verdict("qk_sig_sig_nondecreasing_fraction", r, frac, 1.0, frac >= 1.0))
    else:
        out.append(Verdict("attn_noise2_minus_signal", r, last["attn_noise2_mean"] - last["attn_signal_mean"], 0.0,
                           last["attn_noise2_mean"] > last["attn_signal_mean"], True))
        ratio = last["V_noise2_max"] / abs(last["V_plus"])
        out.append(Verdict("max_V_noise2_over_abs_V_plus", r, ratio, 1.0, ratio > 1.0, True))
        frac = _series_nondecreasing_fraction([s.summary["qk_sig_noise2_mean"] for s in snapshots])
        out.append(Verdict("qk_sig_noise2_nondecreasing_fraction", r, frac, 1.0, frac >= 1.0))
    dev0 = first["initial_attention_max_dev"]
    out.append(Verdict("initial_attention_max_dev_from_uniform", r, dev0, 0.05, dev0 <= 0.05))
    if r == "benign":
        # the signal query keeps moving toward its own key while the signal is winning
        alphas = [s.summary["alpha_pp"] for s in snapshots if "alpha_pp" in s.summary]
        a_min = float(np.nanmin(alphas)) if alphas else math.nan
        out.append(Verdict("alpha_pp_min", r, a_min, 0.0, a_min >= 0.0))
    res = [s.summary["residual_max"] for s in snapshots if "residual_max" in s.summary]
    r_max = float(np.nanmax(res)) if res else math.nan
    out.append(Verdict("decomposition_residual_max", r, r_max, diag.SPAN_TOL, r_max <= diag.SPAN_TOL))
    out.append(Verdict("converged", r, float(result.converged), 1.0, bool(result.converged)))
    out.append(Verdict("test_loss_below_cutoff" if r == "benign" else "test_loss_above_cutoff", r, tl, 0.2,
                       tl < 0.2 if r == "benign" else tl > 0.2))
    return out


def run_dynamics(cfg: DynamicsConfig, out_dir=None, test_samples: int = 100) -> DynamicsResult:
    """Train one preset with a snapshot hook; optionally write the CSV and verdict file."""
    root = Rng(cfg.seed).split(("dynamics", cfg.regime))
    data = generate_dataset(cfg.N, cfg.data_params, root.split("train"))
    test = generate_dataset(test_samples, cfg.data_params, root.split("test"))
    s = default_init_std(cfg.d)
    init = InitConfig(s if cfg.sigma_h is None else cfg.sigma_h, s if cfg.sigma_v is None else cfg.sigma_v,
                      seed=root.split("init").seed)
    params0 = init_model(init, cfg.dims)
    snaps = []
    harmful = cfg.regime == "harmful"

    def hook(step, params, loss):
        nxt = gd_step(params, data, cfg.eta)
        snap = diag.snapshot(step, params, data, nxt=nxt, initial=params0, harmful=harmful,
                             full_decomposition=cfg.full_decomposition, keep_arrays=False)
        snap.summary["train_loss"] = loss
        if step == 0:
            A = diag.attention_rows(params, data.X)
            snap.summary["initial_attention_max_dev"] = float(np.abs(A - 1.0 / cfg.M).max())
        snaps.append(snap)

    result = train(params0, data, cfg.train_config, hook=hook)
    tl = test_loss(result.final_params, test)
    verdicts = dynamics_verdicts(cfg, snaps, result, tl)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        diag.write_dynamics_csv(os.path.join(out_dir, f"dynamics_{cfg.regime}.csv"), snaps)
        write_verdicts(os.path.join(out_dir, f"verdicts_{cfg.regime}.csv"), verdicts)
    return DynamicsResult(snaps, result, verdicts, tl, data)


# ---------------------------------------------------------------------------
# initialization concentration


@dataclass(frozen=True)
class ConcentrationConfig:
    d: int = 1024
    d_h: int = 512
    d_v: int = 512
    N: int = 64
    M: int = 16
    snr: float = 1.0
    sigma_p: float = 0.2
    cp: float | None = None
    delta: float = 0.1
    trials: int = 100
    seed: int = 0
    sigma_h: float | None = None   # None -> default_init_std(d)
    sigma_v: float | None = None   # None -> small enough for the value bound (see value_init_std)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")

    @property
    def data_params(self) -> DataModelParams:
        return DataModelParams(self.d, self.M, mu_norm_for_snr(self.snr, self.sigma_p, self.d), self.sigma_p, self.cp)


def value_init_std(cfg: ConcentrationConfig) -> float:
    """Value-path init small enough that every |x^T W_V w_O| is about d_h^{-1/4} / (2 sqrt(log))."""
    p = cfg.data_params
    scale = max(p.mu_norm, p.sigma_p_tilde * math.sqrt(cfg.d))
    return cfg.d_h ** -0.25 / (scale * 2.0 * math.sqrt(math.log(2 * cfg.N * cfg.M / cfg.delta)))


@dataclass
class ConcentrationRow:
    name: str
    group: str
    holds: int
    trials: int
    required_rate: float
    gated: bool

    @property
    def rate(self) -> float:
        return self.holds / self.trials

    @property
    def status(self) -> str:
        if self.gated:
            return "precondition unmet"
        if self.trials == 1:
            return "holds" if self.holds == 1 else "violated"
        return "pass" if self.rate >= self.required_rate else "fail"

    def as_dict(self) -> dict:
        return {"name": self.name, "group": self.group, "holds": self.holds, "trials": self.trials,
                "rate": self.rate if self.trials > 1 and not self.gated else "n/a",
                "required_rate": self.required_rate, "status": self.status}


CONCENTRATION_COLUMNS = ["name", "group", "holds", "trials", "rate", "required_rate", "status"]


def _preconditions(cfg: ConcentrationConfig) -> dict:
    N, M, dl = cfg.N, cfg.M, cfg.delta
    return {
        "class-balance": N >= 8 * math.log(4 / dl),
        "qk-init": cfg.d_h >= 8 * math.log(6 * N * N * M * M / dl),
        "value-init": cfg.d_h >= 8 * math.log(6 * N * N * M * M / dl),
        "noise-geometry": cfg.d >= 8 * math.log(4 * N * M / dl),
    }


def _in_band(x, nominal):
    x = np.asarray(x)
    return bool(np.all((x >= 0.5 * nominal) & (x <= 1.5 * nominal)))


def _offdiag_absmax(G):
    G = np.abs(G.copy())
    np.fill_diagonal(G, 0.0)
    return float(G.max()) if G.size else 0.0


def concentration_trial(cfg: ConcentrationConfig, trial: int) -> dict:
    """Which of the tracked bounds hold for one independent init + dataset."""
    p = cfg.data_params
    rng = Rng(cfg.seed).split(("concentration", trial))
    data = generate_dataset(cfg.N, p, rng.split("data"))
    sh = default_init_std(cfg.d) if cfg.sigma_h is None else cfg.sigma_h
    sv = value_init_std(cfg) if cfg.sigma_v is None else cfg.sigma_v
    params = init_model(InitConfig(sh, sv, seed=rng.split("init").seed), Dims(cfg.d, cfg.d_h, cfg.d_v, cfg.M))
    qk = diag.compute_qk(params, data)
    V = diag.compute_scalarized_v(params, data)
    N, M, d, dh, dl = cfg.N, cfg.M, cfg.d, cfg.d_h, cfg.delta
    mu, st, sp = p.mu_norm, p.sigma_p_tilde, p.sigma_p
    L2 = math.sqrt(dh * math.log(6 * N * N * M * M / dl))
    s2 = sh * sh
    out = {}
    npos = int(np.sum(data.y == 1))
    out["class_balance"] = N / 4 <= npos <= 3 * N / 4

    bound_v = dh ** -0.25
    out["V_signal_abs"] = max(abs(V.V_plus), abs(V.V_minus)) <= bound_v
    out["V_noise_abs"] = float(np.abs(V.V_noise).max()) <= bound_v

    sig_nom = mu * mu * s2 * dh
    out["q_signal_norm"] = _in_band([qk.q_plus @ qk.q_plus, qk.q_minus @ qk.q_minus], sig_nom)
    out["k_signal_norm"] = _in_band([qk.k_plus @ qk.k_plus, qk.k_minus @ qk.k_minus], sig_nom)
    n2_nom = st * st * s2 * d * dh
    out["q_noise2_norm"] = _in_band(np.sum(qk.q_noise[:, 0] ** 2, axis=-1), n2_nom)
    out["k_noise2_norm"] = _in_band(np.sum(qk.k_noise[:, 0] ** 2, axis=-1), n2_nom)
    if M > 2:
        ni_nom = sp * sp * s2 * d * dh
        out["q_noise_norm"] = _in_band(np.sum(qk.q_noise[:, 1:] ** 2, axis=-1), ni_nom)
        out["k_noise_norm"] = _in_band(np.sum(qk.k_noise[:, 1:] ** 2, axis=-1), ni_nom)

    ss = [qk.q_plus @ qk.q_minus, qk.k_plus @ qk.k_minus, qk.q_plus @ qk.k_plus, qk.q_minus @ qk.k_minus,
          qk.q_plus @ qk.k_minus, qk.q_minus @ qk.k_plus]
    out["signal_signal_cross"] = max(abs(x) for x in ss) <= 2 * mu * mu * s2 * L2
    qn = qk.q_noise.reshape(-1, dh)
    kn = qk.k_noise.reshape(-1, dh)
    qs = np.stack([qk.q_plus, qk.q_minus])
    ks = np.stack([qk.k_plus, qk.k_minus])
    sn = max(np.abs(qs @ kn.T).max(), np.abs(qn @ ks.T).max(), np.abs(qs @ qn.T).max(), np.abs(ks @ kn.T).max())
    out["signal_noise_cross"] = sn <= 2 * mu * st * s2 * math.sqrt(d) * L2
    nn = max(np.abs(qn @ kn.T).max(), _offdiag_absmax(qn @ qn.T), _offdiag_absmax(kn @ kn.T))
    out["noise_noise_cross"] = nn <= 2 * st * st * s2 * d * L2

    xi = data.X[:, 1:, :]
    norms = np.sum(xi ** 2, axis=-1)
    out["xi2_norm"] = _in_band(norms[:, 0], st * st * d)
    if M > 2:
        out["xi_norm"] = _in_band(norms[:, 1:], sp * sp * d)
    flat = xi.reshape(-1, d)
    out["xi_cross"] = _offdiag_absmax(flat @ flat.T) <= 2 * st * st * math.sqrt(d * math.log(4 * N * N * M * M / dl))
    return out


_GROUP = {"class_balance": "class-balance", "V_signal_abs": "value-init", "V_noise_abs": "value-init",
          "xi2_norm": "noise-geometry", "xi_norm": "noise-geometry", "xi_cross": "noise-geometry"}


def concentration_report(cfg: ConcentrationConfig) -> list:
    gates = _preconditions(cfg)
    counts = {}
    for t in range(cfg.trials):
        for name, ok in concentration_trial(cfg, t).items():
            counts[name] = counts.get(name, 0) + int(ok)
    rows = []
    for name, holds in counts.items():
        group = _GROUP.get(name, "qk-init")
        required = 0.99 if name == "class_balance" else 0.95
        rows.append(ConcentrationRow(name, group, holds, cfg.trials, required, not gates[group]))
    return rows
