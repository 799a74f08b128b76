"""Plain-text and image writers: heatmap CSV, verdict file, PPM heatmap."""
from __future__ import annotations

import csv
import math

import numpy as np

HEATMAP_COLUMNS = ["N", "snr", "n_snr2", "mu_norm", "train_loss", "test_loss", "steps", "converged", "class"]
VERDICT_COLUMNS = ["name", "regime", "observed", "threshold", "result"]


def fmt(x) -> str:
    """17 significant digits for floats so doubles round-trip through text."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_heatmap_csv(path, cells) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEATMAP_COLUMNS)
        for c in cells:
            w.writerow([fmt(c.N), fmt(c.snr), fmt(c.n_snr2), fmt(c.mu_norm), fmt(c.train_loss),
                        fmt(c.test_loss), fmt(c.steps), fmt(c.converged), c.classification])


def read_heatmap_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({"N": int(r["N"]), "snr": float(r["snr"]), "n_snr2": float(r["n_snr2"]),
                        "mu_norm": float(r["mu_norm"]), "train_loss": float(r["train_loss"]),
                        "test_loss": float(r["test_loss"]), "steps": int(r["steps"]),
                        "converged": r["converged"] == "true", "class": r["class"]})
    return out


def write_verdicts(path, verdicts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_COLUMNS)
        for v in verdicts:
            w.writerow([v.name, v.regime, fmt(v.observed), fmt(v.threshold), "pass" if v.passed else "fail"])


def read_verdicts(path) -> dict:
    with open(path, newline="") as fh:
        return {r["name"]: r for r in csv.DictReader(fh)}


def write_table(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


# ---------------------------------------------------------------------------
# heatmap image

# a few anchors of a dark-blue -> yellow ramp; low test loss is bright
_RAMP = np.array([[253, 231, 37], [94, 201, 98], [33, 145, 140], [59, 82, 139], [68, 1, 84]], dtype=float)


def _color(value, vmax):
    if not math.isfinite(value):
        return np.array([128, 128, 128], dtype=np.uint8)
    t = min(max(value / vmax, 0.0), 1.0) * (len(_RAMP) - 1)
    i = min(int(t), len(_RAMP) - 2)
    frac = t - i
    return np.round(_RAMP[i] * (1 - frac) + _RAMP[i + 1] * frac).astype(np.uint8)


def render_heatmap(cells, boundary_c=None, cell_px: int = 16, vmax: float = 0.7) -> np.ndarray:
    """RGB image: columns are N (left to right), rows are SNR (high at top).

    If ``boundary_c`` is given, the curve N * snr^2 = c is drawn in red,
    interpolating log(snr) linearly between grid rows.
    """
    Ns = sorted({c.N for c in cells})
    snrs = sorted({c.snr for c in cells})
    H, W = len(snrs) * cell_px, len(Ns) * cell_px
    img = np.zeros((H, W, 3), dtype=np.uint8)
    for c in cells:
        col = Ns.index(c.N)
        row = len(snrs) - 1 - snrs.index(c.snr)
        img[row * cell_px:(row + 1) * cell_px, col * cell_px:(col + 1) * cell_px] = _color(c.test_loss, vmax)
    if boundary_c is not None and len(snrs) > 1 and boundary_c > 0:
        log_s = np.log(snrs)
        for col, N in enumerate(Ns):
            target = 0.5 * math.log(boundary_c / N)
            # fractional row index (from the bottom, in cell units, at cell centres)
            pos = np.interp(target, log_s, np.arange(len(snrs)), left=-1, right=len(snrs))
            y = H - 1 - int(round((pos + 0.5) * cell_px))
            if 0 <= y < H:
                img[max(y - 1, 0):y + 1, col * cell_px:(col + 1) * cell_px] = (255, 0, 0)
    return img


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 portable pixmap."""
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
