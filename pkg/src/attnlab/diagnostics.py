"""Theory-side quantities tracked during training.

Vectorized Q/K are the per-token projections ``q = x^T W_Q`` and ``k = x^T W_K``;
scalarized V are the scalars ``x^T W_V w_O``.  Noise-token arrays are indexed
``[n, i - 2]`` for token i in 2..M (0-based column 0 is the high-variance
token).  Signal-indexed arrays use column 0 for ``+`` and 1 for ``-``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data_model import Dataset
from .loss_grad import loss_derivative
from .model import ModelParams, attention_rows, forward
from .numerics import least_squares, stable_softmax

COND_LIMIT = 1e8
DEGENERATE_RIDGE = 1e-12
SPAN_TOL = 1e-8

DYNAMICS_COLUMNS = [
    "step", "qk_sig_sig", "qk_sig_noise2_mean", "qk_noise_sig_mean", "qk_noise_noise_mean",
    "attn_signal_mean", "attn_noise2_mean", "V_plus", "V_minus", "V_noise_absmax",
    "lambda_min", "alpha_pp", "alpha_noise_max", "residual_max",
]


@dataclass
class QKVectors:
    q_plus: np.ndarray
    q_minus: np.ndarray
    k_plus: np.ndarray
    k_minus: np.ndarray
    q_noise: np.ndarray  # (N, M-1, d_h)
    k_noise: np.ndarray  # (N, M-1, d_h)

    def q_signal(self, sign: int) -> np.ndarray:
        return self.q_plus if sign > 0 else self.q_minus

    def k_signal(self, sign: int) -> np.ndarray:
        return self.k_plus if sign > 0 else self.k_minus

    def sample_logits(self, n: int, sign: int) -> np.ndarray:
        """M x M logits of sample n rebuilt from inner products (token order as in X)."""
        Q = np.vstack([self.q_signal(sign), self.q_noise[n]])
        K = np.vstack([self.k_signal(sign), self.k_noise[n]])
        return Q @ K.T


def compute_qk(params: ModelParams, data: Dataset) -> QKVectors:
    mu_plus, mu_minus = data.params.signals
    noise = data.X[:, 1:, :]
    return QKVectors(
        q_plus=mu_plus @ params.W_Q, q_minus=mu_minus @ params.W_Q,
        k_plus=mu_plus @ params.W_K, k_minus=mu_minus @ params.W_K,
        q_noise=noise @ params.W_Q, k_noise=noise @ params.W_K,
    )


@dataclass
class ScalarizedV:
    V_plus: float
    V_minus: float
    V_noise: np.ndarray  # (N, M-1)
    gamma_plus: float | None = None
    gamma_minus: float | None = None
    rho: np.ndarray | None = None


def compute_scalarized_v(params: ModelParams, data: Dataset, initial: ModelParams | None = None) -> ScalarizedV:
    """V values; with ``initial`` also the accumulated ``(V_t - V_0) / ||w_O||^2``."""
    mu_plus, mu_minus = data.params.signals
    u = params.value_direction
    out = ScalarizedV(float(mu_plus @ u), float(mu_minus @ u), data.X[:, 1:, :] @ u)
    if initial is not None:
        v0 = compute_scalarized_v(initial, data)
        w2 = float(params.w_O @ params.w_O)
        out.gamma_plus = (out.V_plus - v0.V_plus) / w2
        out.gamma_minus = (out.V_minus - v0.V_minus) / w2
        out.rho = (out.V_noise - v0.V_noise) / w2
    return out


@dataclass
class GapSet:
    """Logit gaps.  ``Lambda[n, s, j]`` = <q_s,k_s> - <q_s,k_{n,j}>;
    ``Lambda_noise[n, i, s, j]`` = <q_{n,i},k_s> - <q_{n,i},k_{n,j}>.
    Psi arrays (sparse-noise preference) are filled only when requested."""

    Lambda: np.ndarray
    Lambda_noise: np.ndarray
    labels: np.ndarray
    Psi: np.ndarray | None = None          # [n, s]      <q_s,k_{n,2}> - <q_s,k_s>
    Psi_sig: np.ndarray | None = None      # [n, s, j]   <q_s,k_{n,2}> - <q_s,k_{n,j}>
    Psi_noise_sig: np.ndarray | None = None  # [n, i, s] <q_{n,i},k_{n,2}> - <q_{n,i},k_s>
    Psi_noise: np.ndarray | None = None    # [n, i, j]   <q_{n,i},k_{n,2}> - <q_{n,i},k_{n,j}>

    def own_label_min(self) -> float:
        """Smallest gap over every query of every sample, using the sample's own signal."""
        s = np.where(self.labels == 1, 0, 1)
        n = np.arange(len(s))
        return float(min(self.Lambda[n, s].min(), self.Lambda_noise[n, :, s].min()))


def compute_gaps(qk: QKVectors, labels, harmful: bool = False) -> GapSet:
    qs = np.stack([qk.q_plus, qk.q_minus])            # (2, d_h)
    ks = np.stack([qk.k_plus, qk.k_minus])
    qs_ks = np.einsum("se,se->s", qs, ks)             # <q_s, k_s>
    qs_kn = np.einsum("se,nje->nsj", qs, qk.k_noise)  # <q_s, k_{n,j}>
    qn_ks = np.einsum("nie,se->nis", qk.q_noise, ks)  # <q_{n,i}, k_s>
    qn_kn = np.einsum("nie,nje->nij", qk.q_noise, qk.k_noise)
    gaps = GapSet(
        Lambda=qs_ks[None, :, None] - qs_kn,
        Lambda_noise=qn_ks[:, :, :, None] - qn_kn[:, :, None, :],
        labels=np.asarray(labels),
    )
    if harmful:
        gaps.Psi = qs_kn[:, :, 0] - qs_ks[None, :]
        gaps.Psi_sig = qs_kn[:, :, :1] - qs_kn
        gaps.Psi_noise_sig = qn_kn[:, :, :1] - qn_ks
        gaps.Psi_noise = qn_kn[:, :, :1] - qn_kn
    return gaps


def attention_mass(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Per query token: (mass on signal token, on token 2, on tokens 3..M).

    ``X`` may be one sample (M, d) -> (M, 3) or a batch (N, M, d) -> (N, M, 3).
    """
    A = attention_rows(params, X)
    return np.stack([A[..., 0], A[..., 1], A[..., 2:].sum(axis=-1)], axis=-1)


# ---------------------------------------------------------------------------
# increment decomposition


@dataclass
class Decomposition:
    name: str
    coefficients: np.ndarray
    labels: list
    residual_norm: float
    increment_norm: float
    condition: float
    regularized: bool = False
    underdetermined: bool = False

    @property
    def relative_residual(self) -> float:
        if self.increment_norm == 0:
            return 0.0
        return self.residual_norm / self.increment_norm

    @property
    def degenerate(self) -> bool:
        return self.regularized or self.underdetermined or self.relative_residual > SPAN_TOL

    def coefficient(self, label):
        return float(self.coefficients[self.labels.index(label)])


@dataclass
class DecompositionReport:
    items: dict = field(default_factory=dict)

    def __getitem__(self, name) -> Decomposition:
        return self.items[name]

    @property
    def alpha_pp(self) -> float:
        return self.items["q+"].coefficient("k+")

    @property
    def alpha_mm(self) -> float:
        return self.items["q-"].coefficient("k-")

    def alpha_signal_noise(self, sign: int) -> np.ndarray:
        """The alpha_{n,+-,i} coefficients of the signal-query increment (flat)."""
        d = self.items["q+" if sign > 0 else "q-"]
        return d.coefficients[1:]

    @property
    def residual_max(self) -> float:
        return max(item.relative_residual for item in self.items.values())

    @property
    def any_degenerate(self) -> bool:
        return any(item.degenerate for item in self.items.values())


def _solve(name, basis, labels, target) -> Decomposition:
    B = np.asarray(basis)
    sv = np.linalg.svd(B, compute_uv=False) if B.size else np.zeros(0)
    cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else math.inf
    under = B.shape[0] > B.shape[1]
    regularized = cond > COND_LIMIT
    c, res = least_squares(B, target, DEGENERATE_RIDGE if regularized else 0.0)
    return Decomposition(name, c, labels, res, float(np.linalg.norm(target)), cond, regularized, under)


def decompose_increment(prev, nxt, full: bool = True) -> DecompositionReport:
    """Express every q/k increment of one GD step in its prescribed span.

    ``prev`` and ``nxt`` are ``(params, data)`` pairs from consecutive steps.
    The q_s increment is decomposed over {k_s} and {k_{n,i} : y_n = s}; a noise
    query increment over {k_+, k_-} and all k_{n',i'}; k increments mirror this
    with q vectors.  ``full=False`` skips the per-noise-token increments.
    """
    params0, data = prev
    params1, _ = nxt
    a, b = compute_qk(params0, data), compute_qk(params1, data)
    N, Mm1 = data.X.shape[0], data.X.shape[1] - 1
    report = DecompositionReport()
    all_noise = [(n, i + 2) for n in range(N) for i in range(Mm1)]
    for kind, src, dst in (("q", "k", a), ("k", "q", a)):
        for sign, tag in ((1, "+"), (-1, "-")):
            members = np.flatnonzero(data.y == sign)
            basis = [getattr(a, f"{src}_{'plus' if sign > 0 else 'minus'}")]
            labels = [f"{src}{tag}"]
            for n in members:
                for i in range(Mm1):
                    basis.append(getattr(a, f"{src}_noise")[n, i])
                    labels.append((int(n), i + 2))
            name = f"{kind}{tag}"
            field_name = f"{kind}_{'plus' if sign > 0 else 'minus'}"
            delta = getattr(b, field_name) - getattr(a, field_name)
            report.items[name] = _solve(name, basis, labels, delta)
        if not full:
            continue
        basis = [getattr(a, f"{src}_plus"), getattr(a, f"{src}_minus")]
        basis += [getattr(a, f"{src}_noise")[n, i - 2] for n, i in all_noise]
        labels = [f"{src}+", f"{src}-"] + all_noise
        for n, i in all_noise:
            delta = getattr(b, f"{kind}_noise")[n, i - 2] - getattr(a, f"{kind}_noise")[n, i - 2]
            name = (kind, n, i)
            report.items[name] = _solve(name, basis, labels, delta)
    return report


def _signal_query_attention(qk: QKVectors, n: int, sign: int) -> np.ndarray:
    """Softmax row of the signal query in sample n, from q/k inner products."""
    q = qk.q_signal(sign)
    logits = np.concatenate([[q @ qk.k_signal(sign)], qk.k_noise[n] @ q])
    return stable_softmax(logits)


def closed_form_alpha_signal(params: ModelParams, data: Dataset, eta: float, sign: int = 1):
    """Closed-form alpha_{s,s} and alpha_{n,s,i} for the signal query ``q_s``.

    Built from q/k inner products, scalarized V and loss derivatives only.
    Returns ``(alpha_ss, {(n, i): alpha_{n,s,i}})``.
    """
    qk = compute_qk(params, data)
    V = compute_scalarized_v(params, data)
    N, M = data.X.shape[0], data.X.shape[1]
    lp = loss_derivative(data.y * forward(params, data.X))
    mu2 = data.params.mu_norm ** 2
    V_sig = V.V_plus if sign > 0 else V.V_minus
    pre = eta / (N * M)
    alpha_ss = 0.0
    noise = {}
    for n in np.flatnonzero(data.y == sign):
        phi = _signal_query_attention(qk, n, sign)
        vals = np.concatenate([[V_sig], V.V_noise[n]])
        # first entry of v^T (diag(phi) - phi phi^T), spelled out term by term
        head = V_sig * (phi[0] - phi[0] ** 2) - sum(V.V_noise[n, i - 1] * phi[0] * phi[i] for i in range(1, M))
        alpha_ss += -sign * lp[n] * mu2 * head
        for i in range(1, M):
            term = (-V_sig * phi[0] * phi[i] + vals[i] * (phi[i] - phi[i] ** 2)
                    - sum(vals[k] * phi[i] * phi[k] for k in range(1, M) if k != i))
            noise[(int(n), i + 1)] = -sign * pre * lp[n] * mu2 * term
    return pre * alpha_ss, noise


def predicted_v_delta(params: ModelParams, data: Dataset, eta: float):
    """One-step change of (gamma_+, gamma_-, rho) predicted by the V update rule.

    Uses attention rebuilt from q/k inner products and loss derivatives at the
    current step.  Exact when the noise is orthogonal to both signals.
    Returns ``(d_gamma_plus, d_gamma_minus, d_rho[N, M-1])``.
    """
    qk = compute_qk(params, data)
    N, M = data.X.shape[0], data.X.shape[1]
    lp = loss_derivative(data.y * forward(params, data.X))
    mu2 = data.params.mu_norm ** 2
    pre = eta / (N * M)
    # column sums of the attention matrices: total attention each key token receives
    recv = np.empty((N, M))
    for n in range(N):
        A = stable_softmax(qk.sample_logits(n, int(data.y[n])), axis=-1)
        recv[n] = A.sum(axis=0)
    pos, neg = data.y == 1, data.y == -1
    d_gp = -pre * mu2 * float(np.sum(lp[pos] * recv[pos, 0]))
    d_gm = pre * mu2 * float(np.sum(lp[neg] * recv[neg, 0]))
    noise = data.X[:, 1:, :]
    gram = np.einsum("nid,mjd->nimj", noise, noise)   # <xi_{n,i}, xi_{n',i'}>
    weights = data.y * lp                             # +l' on S_+, -l' on S_-
    d_rho = -pre * np.einsum("nimj,m,mj->ni", gram, weights, recv[:, 1:])
    return d_gp, d_gm, d_rho


def observed_v_delta(before: ModelParams, after: ModelParams, data: Dataset):
    v0, v1 = compute_scalarized_v(before, data), compute_scalarized_v(after, data)
    w2 = float(before.w_O @ before.w_O)
    return (v1.V_plus - v0.V_plus) / w2, (v1.V_minus - v0.V_minus) / w2, (v1.V_noise - v0.V_noise) / w2


# ---------------------------------------------------------------------------
# snapshots


@dataclass
class DiagnosticsSnapshot:
    step: int
    summary: dict
    qk: QKVectors | None = None
    V: ScalarizedV | None = None
    gaps: GapSet | None = None
    masses: np.ndarray | None = None
    decomposition: DecompositionReport | None = None

    def row(self) -> dict:
        return {k: self.summary.get(k, math.nan) for k in DYNAMICS_COLUMNS}


def snapshot(step: int, params: ModelParams, data: Dataset, nxt: ModelParams | None = None,
             initial: ModelParams | None = None, harmful: bool = False,
             full_decomposition: bool = False, keep_arrays: bool = True) -> DiagnosticsSnapshot:
    """Collect all tracked quantities at ``step``.

    ``nxt`` are the parameters one GD step later; when given, the step's
    increment decomposition is included.
    """
    qk = compute_qk(params, data)
    V = compute_scalarized_v(params, data, initial)
    gaps = compute_gaps(qk, data.y, harmful)
    masses = attention_mass(params, data.X)
    y = data.y
    q_own = np.where(y[:, None] == 1, qk.q_plus, qk.q_minus)
    k_own = np.where(y[:, None] == 1, qk.k_plus, qk.k_minus)
    s = {
        "step": step,
        "qk_sig_sig": float(np.mean(np.einsum("ne,ne->n", q_own, k_own))),
        "qk_sig_noise2_mean": float(np.mean(np.einsum("ne,ne->n", q_own, qk.k_noise[:, 0]))),
        "qk_noise_sig_mean": float(np.mean(np.einsum("nie,ne->ni", qk.q_noise, k_own))),
        "qk_noise_noise_mean": float(np.mean(np.einsum("nie,nje->nij", qk.q_noise, qk.k_noise))),
        "attn_signal_mean": float(masses[..., 0].mean()),
        "attn_noise2_mean": float(masses[..., 1].mean()),
        "attn_other_mean": float(masses[..., 2].mean()),
        "V_plus": V.V_plus,
        "V_minus": V.V_minus,
        "V_noise_absmax": float(np.abs(V.V_noise).max()),
        "V_noise2_max": float(V.V_noise[:, 0].max()),
        "lambda_min": gaps.own_label_min(),
    }
    decomposition = None
    if nxt is not None:
        decomposition = decompose_increment((params, data), (nxt, data), full=full_decomposition)
        noise_alphas = [decomposition.alpha_signal_noise(sg) for sg in (1, -1) if np.any(y == sg)]
        noise_alphas = np.concatenate(noise_alphas) if noise_alphas else np.zeros(0)
        s["alpha_pp"] = decomposition.alpha_pp if np.any(y == 1) else math.nan
        s["alpha_noise_max"] = float(noise_alphas.max()) if noise_alphas.size else math.nan
        s["residual_max"] = decomposition.residual_max
    if not keep_arrays:
        return DiagnosticsSnapshot(step, s, decomposition=decomposition)
    return DiagnosticsSnapshot(step, s, qk, V, gaps, masses, decomposition)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_dynamics_csv(path, snapshots) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DYNAMICS_COLUMNS)
        for snap in snapshots:
            row = snap.row()
            w.writerow([_fmt(row[c]) for c in DYNAMICS_COLUMNS])


def read_dynamics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]
