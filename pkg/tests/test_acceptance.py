"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line that
is repeated in the terminal summary."""
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from attnlab import cli
from attnlab import diagnostics as D
from attnlab import experiments as E
from attnlab.data_model import DataModelParams, sample_noise
from attnlab.loss_grad import analytic_gradients, finite_difference_gradients, max_relative_error, softmax_jacobian
from attnlab.numerics import Rng, stable_softmax
from attnlab.trainer import gd_step
from conftest import tiny_instance


def _line(record, tag, ok, detail, elapsed, budget):
    within = elapsed < budget
    record(f"[{tag}] {'PASS' if ok and within else 'FAIL'}  {detail}  time={elapsed:.2f}s (budget {budget:g}s)")
    return ok and within


def test_c1_gradient_oracle(record_acceptance):
    t = time.perf_counter()
    worst = 0.0
    for k in range(20):
        params, data = tiny_instance(1000 + k)
        worst = max(worst, max_relative_error(analytic_gradients(params, data), finite_difference_gradients(params, data)))
    el = time.perf_counter() - t
    assert _line(record_acceptance, "1 gradient oracle", worst <= 1e-6, f"max rel err {worst:.3e} <= 1e-6", el, 5)


def test_c2_softmax_jacobian(record_acceptance):
    t = time.perf_counter()
    rng = Rng(2)
    worst_sum, min_diag, max_off, asym, min_eig = 0.0, np.inf, -np.inf, 0.0, np.inf
    for k in range(1000):
        m = 2 + k % 15
        phi = stable_softmax(3.0 * rng.standard_normal(m))
        J = softmax_jacobian(phi)
        worst_sum = max(worst_sum, np.abs(J.sum(axis=0)).max(), np.abs(J.sum(axis=1)).max())
        min_diag = min(min_diag, np.diag(J).min())
        max_off = max(max_off, J[~np.eye(m, dtype=bool)].max())
        asym = max(asym, np.abs(J - J.T).max())
        min_eig = min(min_eig, np.linalg.eigvalsh(J).min())
    el = time.perf_counter() - t
    ok = worst_sum <= 1e-12 and min_diag >= 0 and max_off <= 0 and asym == 0 and min_eig >= -1e-10
    assert _line(record_acceptance, "2 softmax jacobian", ok,
                 f"|row/col sum| {worst_sum:.1e}, min diag {min_diag:.1e}, max offdiag {max_off:.1e}, "
                 f"min eig {min_eig:.1e}", el, 1)


def test_c3_decomposition_span(record_acceptance):
    t = time.perf_counter()
    worst_res, worst_alpha = 0.0, 0.0
    instances, seed = [], 300
    while len(instances) < 10:
        params, data = tiny_instance(seed, d=16, M=3, d_h=12, d_v=6, N=4, mu_norm=2.0, sigma_p=0.3, cp=2.0, sigma=0.3)
        seed += 1
        if np.any(data.y == 1):  # alpha_{+,+} needs at least one positive sample
            instances.append((params, data))
    for params, data in instances:
        eta = 0.1
        rep = D.decompose_increment((params, data), (gd_step(params, data, eta), data))
        worst_res = max(worst_res, rep.residual_max)
        a_cf, _ = D.closed_form_alpha_signal(params, data, eta, 1)
        worst_alpha = max(worst_alpha, abs(rep.alpha_pp - a_cf) / abs(a_cf))
    el = time.perf_counter() - t
    ok = worst_res <= 1e-8 and worst_alpha <= 1e-6
    assert _line(record_acceptance, "3 decomposition span", ok,
                 f"max rel residual {worst_res:.1e} <= 1e-8, alpha_pp rel diff {worst_alpha:.1e} <= 1e-6", el, 10)


def test_c4_one_step_value_update(record_acceptance):
    t = time.perf_counter()
    params, data = tiny_instance(44, d=16, M=3, d_h=8, d_v=6, N=4, mu_norm=2.0, sigma_p=0.3, cp=2.0, sigma=0.3)
    eta = 0.2
    worst = 0.0
    checked = []
    for step in range(12):
        if step in (0, 5, 11):
            pred = D.predicted_v_delta(params, data, eta)
            nxt = gd_step(params, data, eta)
            obs = D.observed_v_delta(params, nxt, data)
            worst = max(worst, abs(pred[0] - obs[0]), abs(pred[1] - obs[1]), np.abs(pred[2] - obs[2]).max())
            checked.append(step)
        else:
            nxt = gd_step(params, data, eta)
        params = nxt
    el = time.perf_counter() - t
    assert _line(record_acceptance, "4 value update", worst <= 1e-8,
                 f"steps {checked}: max abs diff {worst:.1e} <= 1e-8", el, 5)


def test_c5_noise_fidelity(record_acceptance):
    t = time.perf_counter()
    p = DataModelParams(d=16, M=2, mu_norm=1.0, sigma_p=1.0)
    z = sample_noise(p, Rng(5), 1.0, count=50_000)
    target = np.eye(16)
    target[0, 0] = target[1, 1] = 0.0
    cov_err = np.abs(z.T @ z / len(z) - target).max()
    mp, mm = p.signals
    orth = max(np.abs(z @ mp).max(), np.abs(z @ mm).max()) / p.mu_norm
    el = time.perf_counter() - t
    ok = cov_err <= 0.05 and orth <= 1e-8
    assert _line(record_acceptance, "5 noise fidelity", ok,
                 f"max cov err {cov_err:.3f} <= 0.05, max |<z, mu>|/|mu| {orth:.1e} <= 1e-8", el, 10)


def test_c6_init_concentration(record_acceptance):
    t = time.perf_counter()
    rows = E.concentration_report(E.ConcentrationConfig(d=1024, d_h=512, N=64, trials=100))
    el = time.perf_counter() - t
    bad = [(r.name, r.holds) for r in rows if r.status != "pass"]
    balance = next(r for r in rows if r.name == "class_balance")
    worst = min(rows, key=lambda r: r.rate)
    ok = not bad and balance.holds >= 99 and all(r.holds >= 95 for r in rows)
    assert _line(record_acceptance, "6 init concentration", ok,
                 f"{len(rows)} bounds; class balance {balance.holds}/100 (>= 99); "
                 f"lowest {worst.name} {worst.holds}/100 (>= 95); failing {bad}", el, 60)


@pytest.fixture(scope="module")
def desk_grid():
    t = time.perf_counter()
    cells = E.run_sweep(E.desk_sweep_config(), jobs=None)
    return cells, time.perf_counter() - t


def _quartiles(cells):
    ranked = sorted(cells, key=lambda c: c.n_snr2)
    q = len(ranked) // 4
    return ranked[-q:], ranked[:q]


def test_c7a_top_quartile_benign(desk_grid, record_acceptance):
    cells, el = desk_grid
    top, _ = _quartiles(cells)
    bad = [(c.N, round(c.snr, 2), round(c.test_loss, 3)) for c in top if not (c.converged and c.test_loss < 0.2)]
    assert _line(record_acceptance, "7a top N*SNR^2 quartile benign", not bad,
                 f"{len(top) - len(bad)}/{len(top)} cells converged with test loss < 0.2; "
                 f"exceptions (N, snr, test loss): {bad}", el, 900)


def test_c7b_bottom_quartile_harmful(desk_grid, record_acceptance):
    cells, el = desk_grid
    _, bottom = _quartiles(cells)
    lo = min(c.test_loss for c in bottom)
    assert _line(record_acceptance, "7b bottom N*SNR^2 quartile harmful", lo > 0.2,
                 f"min test loss {lo:.3f} > 0.2", el, 900)


def test_c7c_rank_correlation(desk_grid, record_acceptance):
    cells, el = desk_grid
    ok_cells = [c for c in cells if c.classification != "failed"]
    rho = spearmanr(np.log([c.n_snr2 for c in ok_cells]), [c.test_loss for c in ok_cells]).statistic
    assert _line(record_acceptance, "7c spearman(log N*SNR^2, test loss)", rho <= -0.8,
                 f"rho {rho:.3f} <= -0.8", el, 900)


@pytest.mark.parametrize("regime", ["benign", "harmful"])
def test_c8_dynamics_verdicts(regime, tmp_path, record_acceptance):
    t = time.perf_counter()
    res = E.run_dynamics(E.dynamics_preset(regime), out_dir=tmp_path)
    el = time.perf_counter() - t
    blocking = [v for v in res.verdicts if v.blocking]
    failed = [v.name for v in blocking if not v.passed]
    detail = "; ".join(f"{v.name} {v.observed:.3f} vs {v.threshold:g}" for v in blocking)
    assert (tmp_path / f"verdicts_{regime}.csv").exists()
    assert _line(record_acceptance, f"8 dynamics {regime} (seed {E.DYNAMICS_SEED})", not failed,
                 f"{detail}; failing {failed}", el, 300)


DETERMINISM_RUNS = [
    ["gen-data"],
    ["train", "--set", "data.d=64", "--set", "model.d_h=32", "--set", "model.d_v=16", "--set", "data.snr=2"],
    ["sweep", "--set", "sweep.N_values=2,6,10", "--set", "sweep.snr_count=3", "--set", "data.d=64",
     "--set", "model.d_h=32", "--set", "model.d_v=32"],
    ["dynamics", "--set", "data.d=128", "--set", "model.d_h=64", "--set", "model.d_v=32", "--set", "data.N=8",
     "--set", "data.mu_norm=8", "--set", "data.sigma_p=0.1", "--set", "data.cp=10", "--set", "train.eta=0.05"],
    ["dynamics", "--set", "dynamics.regime=harmful", "--set", "data.d=128", "--set", "model.d_h=64",
     "--set", "model.d_v=32", "--set", "data.N=8", "--set", "data.mu_norm=2", "--set", "data.sigma_p=0.1",
     "--set", "data.cp=10", "--set", "train.eta=0.05"],
    ["verify-gradients", "--set", "verify.instances=3"],
    ["concentration", "--set", "concentration.trials=3", "--set", "data.d=256", "--set", "model.d_h=128",
     "--set", "model.d_v=64", "--set", "data.N=32", "--set", "data.M=4"],
]


def test_c9_determinism(tmp_path, record_acceptance):
    t = time.perf_counter()
    mismatches = []
    for k, argv in enumerate(DETERMINISM_RUNS):
        a, b = tmp_path / f"{k}a", tmp_path / f"{k}b"
        assert cli.main(argv + ["--jobs", "1", "--out", str(a)]) == 0
        saved = {f.name: f.read_bytes() for f in a.iterdir() if f.name != "manifest.json"}
        for f in a.iterdir():
            if f.name != "manifest.json":
                f.unlink()
        assert cli.main([argv[0], "--manifest", str(a / "manifest.json"), "--jobs", "2", "--out", str(a)]) == 0
        assert cli.main([argv[0], "--manifest", str(a / "manifest.json"), "--jobs", "3", "--out", str(b)]) == 0
        for name, data in saved.items():
            if (a / name).read_bytes() != data or (b / name).read_bytes() != data:
                mismatches.append((argv[0], name))
    el = time.perf_counter() - t
    assert _line(record_acceptance, "9 determinism", not mismatches,
                 f"{len(DETERMINISM_RUNS)} runs rerun from manifest with --jobs 2 and 3; mismatches {mismatches}",
                 el, 600)
