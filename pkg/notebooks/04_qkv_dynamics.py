"""
Query, key and value dynamics in the two regimes
================================================

Trains the benign (N=16, |mu|=25) and harmful (N=10, |mu|=15) presets and
prints a few rows of the tracked quantities.  Pass extra seeds on the command
line to see how the end-state verdicts vary:  python 04_qkv_dynamics.py 1 2 3
"""
import sys

from attnlab.experiments import DYNAMICS_SEED, dynamics_preset, run_dynamics

seeds = [int(s) for s in sys.argv[1:]] or [DYNAMICS_SEED]
cols = ["step", "train_loss", "qk_sig_sig", "qk_sig_noise2_mean", "attn_signal_mean", "attn_noise2_mean",
        "V_plus", "V_noise_absmax", "alpha_pp"]

for seed in seeds:
    for regime in ("benign", "harmful"):
        res = run_dynamics(dynamics_preset(regime, seed=seed), out_dir=f"out_dynamics/seed{seed}")
        print(f"\n== {regime}, seed {seed}: {res.train_result.steps_taken} steps, test loss {res.test_loss:.3f}")
        print("  ".join(f"{c:>12s}" for c in cols))
        snaps = res.snapshots
        for s in snaps[:: max(1, len(snaps) // 6)] + [snaps[-1]]:
            print("  ".join(f"{s.summary.get(c, float('nan')):12.4g}" for c in cols))
        for v in res.verdicts:
            mark = "*" if v.blocking else " "
            print(f" {mark} {v.name:40s} {v.observed:10.4g} vs {v.threshold:g}  {'pass' if v.passed else 'fail'}")
