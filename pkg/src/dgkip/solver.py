"""Regularized ERM in feature space: primal/dual objectives, duality gap,
and certified training of theta.

All functions work on a precomputed feature matrix ``Phi`` (n x D) and labels
``y``; use ``fmap.featurize_batch(ds.inputs)`` to build it.

    P(theta) = sum_i g(y_i theta.phi_i) + lam/2 |theta|^2
    D(alpha) = -sum_i g*(-alpha_i) - 1/(2 lam) |sum_i alpha_i y_i phi_i|^2
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .losses import LossFamily, as_family

log = logging.getLogger(__name__)

NEG_GAP_TOL = 1e-9


class GapInconsistencyError(ArithmeticError):
    """A duality gap came out clearly negative (weak duality violated)."""


@dataclass(frozen=True)
class GapReport:
    primal: float
    dual: float
    gap: float
    radius: float
    lam: float


@dataclass
class SolveConfig:
    max_iters: int = 200
    # certified stopping rule gap <= gap_tol_per_sample * n; 0 means "to machine precision"
    gap_tol_per_sample: float = 1e-8
    armijo: float = 1e-4
    backtrack: float = 0.5
    method: str = "auto"  # auto | newton | gd (logistic only)
    kkt_tol: float = 1e-6  # hinge dual coordinate ascent
    max_epochs: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.gap_tol_per_sample < 0 or self.kkt_tol <= 0:
            raise ValueError("invalid solver tolerances")


@dataclass
class ModelParams:
    theta: np.ndarray
    lam: float
    loss: LossFamily
    feature_spec: Optional[dict] = None
    alpha: Optional[np.ndarray] = None  # dual certificate (hinge)
    converged: bool = True
    gap: float = 0.0
    iterations: int = 0

    def predict(self, Phi) -> np.ndarray:
        return Phi @ self.theta


def default_lambda(n: int, scale: float = 1e-6) -> float:
    return n * scale


def _check(theta, Phi, y, lam):
    if lam <= 0:
        raise ValueError("lambda must be positive")
    Phi = np.asarray(Phi, dtype=np.float64)
    if theta is not None and np.shape(theta) != (Phi.shape[1],):
        raise ValueError(f"theta has shape {np.shape(theta)}, features have dimension {Phi.shape[1]}")
    return Phi, np.asarray(y, dtype=np.float64)


def primal_value(loss, theta, Phi, y, lam) -> float:
    fam = as_family(loss)
    Phi, y = _check(theta, Phi, y, lam)
    m = y * (Phi @ theta)
    return float(np.sum(fam.value_m(m)) + 0.5 * lam * (theta @ theta))


def dual_value(loss, alpha, Phi, y, lam, gram: bool = False) -> float:
    """Dual objective; ``gram=True`` uses the n x n kernel matrix instead of
    the feature-space sum."""
    fam = as_family(loss)
    Phi, y = _check(None, Phi, y, lam)
    alpha = np.asarray(alpha, dtype=np.float64)
    ay = alpha * y
    if gram:
        quad = ay @ (Phi @ Phi.T) @ ay
    else:
        v = Phi.T @ ay
        quad = v @ v
    return float(-np.sum(fam.conj(alpha)) - quad / (2.0 * lam))


def gap_radius(gap: float, lam: float) -> float:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if gap < -NEG_GAP_TOL:
        raise GapInconsistencyError(f"negative duality gap {gap:.3e}")
    return math.sqrt(2.0 * max(gap, 0.0) / lam)


def duality_gap(loss, theta, Phi, y, lam, alpha=None, exact: bool = False) -> GapReport:
    """Gap between P(theta) and D(alpha~).

    ``alpha`` defaults to the dual map of the margins under ``theta``
    (sigmoid-smoothed for hinge unless ``exact``).
    """
    fam = as_family(loss)
    Phi, y = _check(theta, Phi, y, lam)
    if alpha is None:
        m = y * (Phi @ theta)
        alpha = fam.exact_dual_m(m) if exact else fam.dual_m(m)
    p = primal_value(fam, theta, Phi, y, lam)
    d = dual_value(fam, alpha, Phi, y, lam)
    gap = p - d
    scale = max(1.0, abs(p), abs(d))
    if gap < -NEG_GAP_TOL * scale:
        raise GapInconsistencyError(f"negative duality gap {gap:.3e} (P={p}, D={d})")
    gap = max(gap, 0.0)
    return GapReport(p, d, gap, gap_radius(gap, lam), lam)


# -- training -----------------------------------------------------------------


def _logistic_grad(theta, Phi, y, lam):
    m = y * (Phi @ theta)
    return Phi.T @ (y * LossFamily("logistic").deriv_m(m)) + lam * theta, m


def _newton_direction(Phi, w, lam, g):
    """Solve (Phi^T diag(w) Phi + lam I) d = g, picking the cheaper side."""
    n, D = Phi.shape
    if D <= n:
        H = (Phi.T * w) @ Phi
        H[np.diag_indices_from(H)] += lam
        try:
            return cho_solve(cho_factor(H), g)
        except LinAlgError:
            return np.linalg.lstsq(H, g, rcond=None)[0]
    A = Phi * np.sqrt(w)[:, None]
    K = A @ A.T
    K[np.diag_indices_from(K)] += lam
    try:
        inner = cho_solve(cho_factor(K), A @ g)
    except LinAlgError:
        inner = np.linalg.lstsq(K, A @ g, rcond=None)[0]
    return (g - A.T @ inner) / lam


def _train_logistic(Phi, y, lam, cfg: SolveConfig, theta0=None):
    fam = LossFamily("logistic")
    n, D = Phi.shape
    theta = np.zeros(D) if theta0 is None else np.array(theta0, dtype=np.float64)
    tol = cfg.gap_tol_per_sample * n
    method = cfg.method
    if method == "auto":
        method = "newton" if min(n, D) <= 4096 else "gd"
    P = primal_value(fam, theta, Phi, y, lam)
    step_gd = 1.0 / (lam + 0.25 * np.sum(Phi * Phi))
    gap = duality_gap(fam, theta, Phi, y, lam).gap

    def done(gap, theta):
        # gap certificate plus KKT residual |theta - v/lam| = sqrt(2 gap / lam)
        return gap <= tol and gap_radius(gap, lam) <= cfg.kkt_tol * np.linalg.norm(theta)

    it, converged = 0, done(gap, theta)
    while not converged and it < cfg.max_iters:
        it += 1
        g, m = _logistic_grad(theta, Phi, y, lam)
        if method == "newton":
            w = -fam.dual_deriv_m(m)
            d = _newton_direction(Phi, w, lam, g)
            t = 1.0
        else:
            d = g
            t = step_gd * 4.0
        slope = g @ d
        while True:
            cand = theta - t * d
            P_new = primal_value(fam, cand, Phi, y, lam)
            if P_new <= P - cfg.armijo * t * slope or t < 1e-20:
                break
            t *= cfg.backtrack
        # no further progress is representable: accept as converged when the
        # caller asked for machine precision or the gap target already holds
        at_precision = P_new > P or t * np.linalg.norm(d) <= 1e-15 * (1.0 + np.linalg.norm(theta))
        if P_new <= P and np.isfinite(P_new):
            theta, P = cand, P_new
            gap = duality_gap(fam, theta, Phi, y, lam).gap
        if method == "gd":
            step_gd = 2.0 * t / 4.0
        converged = done(gap, theta)
        if at_precision:
            converged = converged or tol == 0 or gap <= tol
            break
    return theta, None, gap, it, converged


@njit(cache=True)
def _dca_epoch(Phi, y, sq, alpha, theta, order, lam):
    worst = 0.0
    D = Phi.shape[1]
    for i in order:
        if sq[i] == 0.0:
            continue
        f = 0.0
        for j in range(D):
            f += Phi[i, j] * theta[j]
        g = 1.0 - y[i] * f
        a = alpha[i]
        if a <= 0.0:
            viol = max(g, 0.0)
        elif a >= 1.0:
            viol = max(-g, 0.0)
        else:
            viol = abs(g)
        if viol == 0.0:
            continue
        worst = max(worst, viol)
        new = min(max(a + lam * g / sq[i], 0.0), 1.0)
        if new != a:
            c = (new - a) * y[i] / lam
            for j in range(D):
                theta[j] += c * Phi[i, j]
            alpha[i] = new
    return worst


def _kkt_violations(alpha, m):
    g = 1.0 - m
    return np.where(alpha <= 0, np.maximum(g, 0), np.where(alpha >= 1, np.maximum(-g, 0), np.abs(g)))


def _active_set_polish(Phi, y, alpha, lam, tol, rounds=25):
    """Snap an approximate dual solution to the exact one.

    Variables at 0 or 1 stay fixed and the free ones are corrected (minimum
    norm change) so that y_i f_i = 1 holds exactly. Violators are moved
    between sets and the solve repeated. Returns None when the KKT
    conditions cannot be verified.
    """
    Yp = y[:, None] * Phi
    ref = np.clip(alpha, 0.0, 1.0)
    edge = 1e-9
    free = (ref > edge) & (ref < 1 - edge)
    upper = ref >= 1 - edge
    for _ in range(rounds):
        a = np.where(upper, 1.0, np.where(free, ref, 0.0))
        if free.any():
            A = Yp[free]
            M = A @ A.T
            for _ in range(3):  # refinement passes; M is often ill-conditioned
                a[free] += np.linalg.lstsq(M, lam - A @ (Yp.T @ a), rcond=None)[0]
            out = free & ((a < -edge) | (a > 1 + edge))
            if out.any():
                upper = upper | (out & (a > 1))
                free = free & ~out
                ref = np.clip(a, 0.0, 1.0)
                continue
            a = np.clip(a, 0.0, 1.0)
        m = Yp @ (Yp.T @ a) / lam
        viol = _kkt_violations(np.where(free, 0.5, a), m)
        if viol.max(initial=0.0) <= tol:
            return a
        low_bad = ~free & ~upper & (m < 1 - tol)
        up_bad = upper & (m > 1 + tol)
        if not (low_bad.any() or up_bad.any()):
            return None
        free = free | low_bad | up_bad
        upper = upper & ~up_bad
        ref = a
    return None


def _qp_dual(Phi, y, lam):
    """Interior-point solve of the hinge dual (box-constrained QP)."""
    from cvxopt import matrix, solvers

    n = Phi.shape[0]
    Yp = y[:, None] * Phi
    P = matrix(Yp @ Yp.T + 1e-12 * np.eye(n))
    q = matrix(-lam * np.ones(n))
    G = matrix(np.vstack([-np.eye(n), np.eye(n)]))
    h = matrix(np.concatenate([np.zeros(n), np.ones(n)]))
    sol = solvers.qp(P, q, G, h, options={"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12})
    return np.clip(np.array(sol["x"]).ravel(), 0.0, 1.0)


# coordinate ascent budget before switching to the QP solve
DCA_WARMUP_EPOCHS = 50
QP_MAX_N = 3000


def _train_hinge(Phi, y, lam, cfg: SolveConfig, alpha0=None):
    """Dual coordinate ascent on alpha in [0,1]^n, theta = Phi^T(alpha y)/lam.

    Small lam makes the dual Hessian nearly singular and coordinate ascent
    crawls; after a short budget the problem is handed to an interior-point
    QP solve whose answer is snapped to the exact active-set solution, then
    coordinate ascent resumes from there if the snap cannot be verified.
    """
    n, D = Phi.shape
    Phi = np.ascontiguousarray(Phi)
    alpha = np.zeros(n) if alpha0 is None else np.clip(np.asarray(alpha0, float), 0, 1)
    sq = y * y * np.einsum("ij,ij->i", Phi, Phi)
    alpha[sq == 0] = 1.0  # unconstrained by the quadratic term
    theta = Phi.T @ (alpha * y) / lam
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    epoch, tried_qp = 0, False
    for epoch in range(1, cfg.max_epochs + 1):
        worst = _dca_epoch(Phi, y, sq, alpha, theta, rng.permutation(n), lam)
        if worst <= cfg.kkt_tol:
            break
        if epoch % 50 == 0:
            theta = Phi.T @ (alpha * y) / lam
        if epoch == DCA_WARMUP_EPOCHS and n <= QP_MAX_N:
            tried_qp = True
            alpha = _qp_dual(Phi, y, lam)
            exact = _active_set_polish(Phi, y, alpha, lam, cfg.kkt_tol)
            if exact is not None:
                alpha = exact
                break
            theta = Phi.T @ (alpha * y) / lam
    # the running theta drifts; verify on a fresh one and repair if needed
    theta = Phi.T @ (alpha * y) / lam
    # theta sums terms of size alpha_i |phi_i| / lam that largely cancel, so
    # margins carry rounding error ~ eps |phi| sum_i alpha_i |phi_i| / lam
    norms = np.sqrt(sq)
    tol = max(cfg.kkt_tol, 10 * np.finfo(float).eps * norms.max(initial=0.0) * (alpha @ norms) / lam)
    converged = _max_kkt_violation(alpha, Phi, y, theta) <= tol
    if not converged:
        exact = _active_set_polish(Phi, y, alpha, lam, tol)
        if exact is None and not tried_qp and n <= QP_MAX_N:
            exact = _active_set_polish(Phi, y, _qp_dual(Phi, y, lam), lam, tol)
        if exact is not None:
            alpha = exact
            theta = Phi.T @ (alpha * y) / lam
            converged = _max_kkt_violation(alpha, Phi, y, theta) <= tol
    gap = duality_gap("hinge", theta, Phi, y, lam, alpha=alpha).gap
    return theta, alpha, gap, epoch, converged


def train_primal(loss, Phi, y, lam, config: Optional[SolveConfig] = None, warm_start=None) -> ModelParams:
    """Minimize P(theta); the result carries its certified duality gap.

    Logistic uses damped Newton (or gradient descent) with Armijo backtracking
    and stops once the gap drops below ``gap_tol_per_sample * n``. Hinge uses
    dual coordinate ascent and stops on the maximal KKT violation.
    ``converged`` is False when the budget ran out first.
    """
    fam = as_family(loss)
    cfg = config or SolveConfig()
    Phi, y = _check(None, Phi, y, lam)
    n = Phi.shape[0]
    if n < 1:
        raise ValueError("need at least one sample")
    if fam.kind == "logistic":
        theta, alpha, gap, it, converged = _train_logistic(Phi, y, lam, cfg, warm_start)
    else:
        theta, alpha, gap, it, converged = _train_hinge(Phi, y, lam, cfg, warm_start)
    if not converged:
        log.warning("train_primal(%s) stopped after %d iterations with gap %.3e", fam.kind, it, gap)
    return ModelParams(theta, lam, fam, alpha=alpha, converged=bool(converged), gap=gap, iterations=it)


def _max_kkt_violation(alpha, Phi, y, theta):
    return float(_kkt_violations(alpha, y * (Phi @ theta)).max(initial=0.0))


def accuracy(theta, Phi, y) -> float:
    """Fraction with y * f > 0 (a zero margin counts as an error)."""
    return float(np.mean(np.asarray(y) * (Phi @ theta) > 0))


# -- checkpoint ---------------------------------------------------------------
#
# "DGKM" | u32 version | f64 lambda | u32 L | L bytes JSON metadata |
# u32 D | D f64 theta | u32 CRC32 of everything after the magic. Little-endian.

MODEL_MAGIC = b"DGKM"
MODEL_VERSION = 1


def save_model(path, params: ModelParams) -> None:
    meta = json.dumps(
        {
            "loss": params.loss.kind,
            "smooth_temperature": params.loss.smooth_temperature,
            "feature_map": params.feature_spec,
            "gap": params.gap,
            "converged": params.converged,
        },
        sort_keys=True,
    ).encode()
    theta = np.asarray(params.theta, dtype="<f8")
    body = (
        struct.pack("<Id", MODEL_VERSION, params.lam)
        + struct.pack("<I", len(meta))
        + meta
        + struct.pack("<I", theta.size)
        + theta.tobytes()
    )
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_model(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checksum failure")
    version, lam = struct.unpack("<Id", body[:12])
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (L,) = struct.unpack("<I", body[12:16])
    meta = json.loads(body[16:16 + L])
    (D,) = struct.unpack("<I", body[16 + L:20 + L])
    theta = np.frombuffer(body, dtype="<f8", count=D, offset=20 + L).astype(np.float64)
    fam = LossFamily(meta["loss"], meta.get("smooth_temperature", 1.0))
    return ModelParams(theta, lam, fam, meta.get("feature_map"), converged=meta.get("converged", True), gap=meta.get("gap", 0.0))
