"""Command-line entry point.

    attnlab <command> [--config PATH] [--out DIR] [--seed U64] [--jobs N] [--paper-scale] [--manifest PATH]

Commands: gen-data, train, sweep, dynamics, verify-gradients, concentration.
Exit codes: 0 success, 1 check or run failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys

from . import __version__
from . import loss_grad
from .config import ConfigError, materialize, parse_text, read_config_file, resolve
from .data_model import DataModelParams, generate_dataset, mu_norm_for_snr, save_dataset
from .model import Dims, InitConfig, default_init_std, init_model, save_checkpoint
from .numerics import Rng
from .report import fmt, render_heatmap, write_heatmap_csv, write_ppm, write_table

COMMANDS = ("gen-data", "train", "sweep", "dynamics", "verify-gradients", "concentration")
MANIFEST = "manifest.json"

OUTPUTS = {
    "gen-data": ["dataset.json"],
    "train": ["loss_trace.csv", "checkpoint.npz", "summary.txt"],
    "sweep": ["heatmap.csv", "heatmap.ppm", "boundary.txt"],
    "dynamics": ["dynamics_{regime}.csv", "verdicts_{regime}.csv"],
    "verify-gradients": ["gradient_check.txt"],
    "concentration": ["concentration.csv"],
}


def _say(*parts):
    print(" ".join(fmt(p) for p in parts), flush=True)


def write_manifest(out_dir, command, cfg, jobs, full_scale) -> dict:
    outputs = [p.format(regime=cfg.get("dynamics.regime", "")) for p in OUTPUTS[command]]
    manifest = {
        "format": "attnlab-manifest", "version": 1,
        "command": command, "tool_version": __version__,
        "config": materialize(cfg), "full_scale": full_scale,
        "seeds": {"run.seed": cfg["run.seed"]}, "jobs": jobs,
        "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "outputs": outputs,
    }
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(path) -> dict:
    try:
        with open(path) as fh:
            m = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    if m.get("format") != "attnlab-manifest":
        raise ConfigError(f"{path}: not an attnlab manifest")
    return m


# ---------------------------------------------------------------------------
# commands


def _data_params(cfg) -> DataModelParams:
    mu = cfg.get("data.mu_norm")
    if mu is None:
        mu = mu_norm_for_snr(cfg["data.snr"], cfg["data.sigma_p"], cfg["data.d"])
    return DataModelParams(cfg["data.d"], cfg["data.M"], mu, cfg["data.sigma_p"], cfg["data.cp"],
                           cfg.get("data.project_noise", True))


def _init(cfg, seed) -> InitConfig:
    s = default_init_std(cfg["data.d"])
    sh = s if cfg["model.sigma_h"] is None else cfg["model.sigma_h"]
    sv = s if cfg["model.sigma_v"] is None else cfg["model.sigma_v"]
    return InitConfig(sh, sv, cfg.get("model.w_o_mode", "constant-normalized"), seed=seed)


def cmd_gen_data(cfg, out, jobs):
    p = _data_params(cfg)
    data = generate_dataset(cfg["data.N"], p, Rng(cfg["run.seed"]).split("train"))
    save_dataset(os.path.join(out, "dataset.json"), data)
    _say("samples", data.N, "positive", len(data.pos), "negative", len(data.neg))
    return 0


def cmd_train(cfg, out, jobs):
    from .trainer import LossTraceWriter, TrainConfig, TrainingDiverged, test_loss, train

    p = _data_params(cfg)
    rng = Rng(cfg["run.seed"])
    data = generate_dataset(cfg["data.N"], p, rng.split("train"))
    test = generate_dataset(cfg["eval.test_samples"], p, rng.split("test"))
    init = _init(cfg, rng.split("init").seed)
    params = init_model(init, Dims(p.d, cfg["model.d_h"], cfg["model.d_v"], p.M))
    tcfg = TrainConfig(cfg["train.eta"], cfg["train.epsilon"], cfg["train.max_steps"], cfg["train.snapshot_every"],
                       cfg["run.seed"])
    with LossTraceWriter(os.path.join(out, "loss_trace.csv")) as tw:
        try:
            res = train(params, data, tcfg, trace_writer=tw)
        except TrainingDiverged as exc:
            if exc.last_good_params is not None:
                save_checkpoint(os.path.join(out, "checkpoint.npz"), exc.last_good_params, init, exc.last_good_step)
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return 1
    save_checkpoint(os.path.join(out, "checkpoint.npz"), res.final_params, init, res.steps_taken)
    tl = test_loss(res.final_params, test)
    lines = [("steps", res.steps_taken), ("converged", res.converged),
             ("train_loss", res.terminal_train_loss), ("test_loss", tl)]
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        for k, v in lines:
            fh.write(f"{k}={fmt(v)}\n")
    for k, v in lines:
        _say(k, v)
    return 0


def sweep_config_from(cfg):
    from .experiments import SweepConfig, geometric_snrs
    from .trainer import TrainConfig

    return SweepConfig(
        N_values=tuple(cfg["sweep.N_values"]),
        snr_values=geometric_snrs(cfg["sweep.snr_min"], cfg["sweep.snr_max"], cfg["sweep.snr_count"]),
        d=cfg["data.d"], M=cfg["data.M"], d_h=cfg["model.d_h"], d_v=cfg["model.d_v"],
        sigma_p=cfg["data.sigma_p"], cp=cfg["data.cp"], project_noise=cfg["data.project_noise"],
        sigma_h=cfg["model.sigma_h"], sigma_v=cfg["model.sigma_v"], w_o_mode=cfg["model.w_o_mode"],
        train=TrainConfig(cfg["train.eta"], cfg["train.epsilon"], cfg["train.max_steps"], 1000),
        test_samples=cfg["sweep.test_samples"], cutoff=cfg["sweep.cutoff"], master_seed=cfg["run.seed"],
    )


def cmd_sweep(cfg, out, jobs):
    from .experiments import classify_boundary, run_sweep

    scfg = sweep_config_from(cfg)
    cells = run_sweep(scfg, jobs=jobs)
    write_heatmap_csv(os.path.join(out, "heatmap.csv"), cells)
    try:
        c, acc = classify_boundary(cells)
        boundary = [("c", c), ("accuracy", acc)]
    except ValueError as exc:
        c = None
        boundary = [("c", "none"), ("accuracy", "none"), ("note", str(exc))]
    write_ppm(os.path.join(out, "heatmap.ppm"), render_heatmap(cells, c))
    failed = sum(1 for x in cells if x.classification == "failed")
    boundary.append(("failed_cells", failed))
    with open(os.path.join(out, "boundary.txt"), "w") as fh:
        for k, v in boundary:
            fh.write(f"{k}={fmt(v)}\n")
    for k, v in boundary:
        _say(k, v)
    return 0


def dynamics_config_from(cfg):
    from .experiments import dynamics_preset

    over = {k.split(".", 1)[1]: cfg[k] for k in ("data.d", "data.M", "data.sigma_p", "data.cp",
                                                 "model.d_h", "model.d_v", "model.sigma_h", "model.sigma_v")}
    over.update(eta=cfg["train.eta"], epsilon=cfg["train.epsilon"], max_steps=cfg["train.max_steps"],
                snapshot_every=cfg["train.snapshot_every"], seed=cfg["run.seed"])
    if cfg["data.N"] is not None:
        over["N"] = cfg["data.N"]
    if cfg["data.mu_norm"] is not None:
        over["mu_norm"] = cfg["data.mu_norm"]
    try:
        return dynamics_preset(cfg["dynamics.regime"], **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_dynamics(cfg, out, jobs):
    from .experiments import run_dynamics

    dcfg = dynamics_config_from(cfg)
    res = run_dynamics(dcfg, out_dir=out, test_samples=cfg["eval.test_samples"])
    _say("steps", res.train_result.steps_taken, "test_loss", res.test_loss)
    for v in res.verdicts:
        _say(v.name, v.observed, v.threshold, "pass" if v.passed else "fail")
    return 0


def cmd_verify_gradients(cfg, out, jobs):
    p = DataModelParams(cfg["data.d"], cfg["data.M"], cfg["data.mu_norm"], cfg["data.sigma_p"], cfg["data.cp"])
    dims = Dims(p.d, cfg["model.d_h"], cfg["model.d_v"], p.M)
    root = Rng(cfg["run.seed"])
    worst = 0.0
    for k in range(cfg["verify.instances"]):
        r = root.split(("instance", k))
        data = generate_dataset(cfg["data.N"], p, r.split("data"))
        params = init_model(InitConfig(cfg["model.sigma_h"], cfg["model.sigma_v"], seed=r.split("init").seed), dims)
        # looked up through the module so a test can swap in a faulty implementation
        a = loss_grad.analytic_gradients(params, data)
        f = loss_grad.finite_difference_gradients(params, data, h=cfg["verify.h"])
        worst = max(worst, loss_grad.max_relative_error(a, f))
    ok = worst <= cfg["verify.tolerance"]
    with open(os.path.join(out, "gradient_check.txt"), "w") as fh:
        fh.write(f"max_relative_error={fmt(worst)}\ntolerance={fmt(cfg['verify.tolerance'])}\n"
                 f"result={'pass' if ok else 'fail'}\n")
    _say("max_relative_error", worst, "pass" if ok else "fail")
    return 0 if ok else 1


def cmd_concentration(cfg, out, jobs):
    from .experiments import CONCENTRATION_COLUMNS, ConcentrationConfig, concentration_report

    ccfg = ConcentrationConfig(d=cfg["data.d"], d_h=cfg["model.d_h"], d_v=cfg["model.d_v"], N=cfg["data.N"],
                               M=cfg["data.M"], snr=cfg["data.snr"], sigma_p=cfg["data.sigma_p"], cp=cfg["data.cp"],
                               delta=cfg["concentration.delta"], trials=cfg["concentration.trials"],
                               seed=cfg["run.seed"], sigma_h=cfg["model.sigma_h"], sigma_v=cfg["model.sigma_v"])
    rows = [r.as_dict() for r in concentration_report(ccfg)]
    write_table(os.path.join(out, "concentration.csv"), rows, CONCENTRATION_COLUMNS)
    for r in rows:
        _say(r["name"], r["group"], r["holds"], r["trials"], r["rate"], r["status"])
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep, "dynamics": cmd_dynamics,
    "verify-gradients": cmd_verify_gradients, "concentration": cmd_concentration,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="attnlab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides run.seed)")
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
        sp.add_argument("--paper-scale", dest="full_scale", action="store_true", help="use the full-size preset")
        sp.add_argument("--manifest", help="rerun exactly as recorded in a manifest.json")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cmd = args.command
    try:
        full_scale = args.full_scale
        if args.manifest:
            m = read_manifest(args.manifest)
            if m["command"] != cmd:
                raise ConfigError(f"manifest was written by {m['command']!r}, not {cmd!r}")
            raw = parse_text(m["config"], args.manifest)
            full_scale = False  # already materialized
        else:
            raw = read_config_file(args.config) if args.config else {}
        raw.update(parse_text("\n".join(args.set), "--set"))
        overrides = {} if args.seed is None else {"run.seed": args.seed}
        cfg = resolve(cmd, raw, full_scale, overrides)
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = args.out or os.path.join("runs", cmd)
    try:
        os.makedirs(out, exist_ok=True)
        write_manifest(out, cmd, cfg, args.jobs, full_scale)
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return 1
    try:
        return HANDLERS[cmd](cfg, out, args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
