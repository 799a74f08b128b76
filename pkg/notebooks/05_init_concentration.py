"""
How tight are the initialization bounds?
========================================

Repeats independent draws of data and weights and counts how often each
two-sided bound on norms and inner products holds.
"""
from attnlab.experiments import ConcentrationConfig, concentration_report

for cfg in (ConcentrationConfig(trials=20), ConcentrationConfig(d=8, d_h=8, d_v=4, N=8, M=3, trials=20)):
    print(f"\nd={cfg.d} d_h={cfg.d_h} N={cfg.N} M={cfg.M}, {cfg.trials} trials")
    for row in concentration_report(cfg):
        r = row.as_dict()
        print(f"  {r['name']:22s} {r['group']:15s} {r['holds']:3d}/{r['trials']}  {r['status']}")
