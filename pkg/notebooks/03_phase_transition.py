"""
Benign vs harmful overfitting over (N, SNR)
===========================================

Sweeps the desk-size grid, fits the boundary N * SNR^2 = c and writes a CSV
plus a PPM heatmap to ./out_phase.  Takes a few seconds per 10 cells.
"""
import os

import numpy as np
from scipy.stats import spearmanr

from attnlab.experiments import classify_boundary, desk_sweep_config, run_sweep
from attnlab.report import render_heatmap, write_heatmap_csv, write_ppm

cfg = desk_sweep_config()
cells = run_sweep(cfg, jobs=None, progress=lambda c: print(
    f"N={c.N:2d} snr={c.snr:6.3f} N*snr^2={c.n_snr2:8.2f} test={c.test_loss:.3f} {c.classification}"))

c, acc = classify_boundary(cells)
print(f"\nfitted boundary N*SNR^2 = {c:.1f}, separation accuracy {acc:.3f}")

x = np.log([cell.n_snr2 for cell in cells])
print("spearman(log N*SNR^2, test loss):", spearmanr(x, [cell.test_loss for cell in cells]).statistic)

# median test loss per quartile of N*SNR^2
ranked = sorted(cells, key=lambda cell: cell.n_snr2)
for k, chunk in enumerate(np.array_split(np.arange(len(ranked)), 4)):
    losses = [ranked[i].test_loss for i in chunk]
    print(f"quartile {k + 1}: N*SNR^2 in [{ranked[chunk[0]].n_snr2:.2f}, {ranked[chunk[-1]].n_snr2:.2f}]"
          f"  median test loss {np.median(losses):.3f}  max {max(losses):.3f}")

os.makedirs("out_phase", exist_ok=True)
write_heatmap_csv("out_phase/heatmap.csv", cells)
write_ppm("out_phase/heatmap.ppm", render_heatmap(cells, c))
print("wrote out_phase/heatmap.csv and out_phase/heatmap.ppm")
