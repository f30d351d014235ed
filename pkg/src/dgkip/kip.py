"""Kernel ridge regression and the KIP objective (squared-loss special case)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .data import Dataset
from .distill import DistillConfig, DistillHistory, OptimizerState, StepRecord, adabelief_step, init_synthetic
from .solver import accuracy

MAX_KIP_DIM = 512


@dataclass(frozen=True)
class KrrSolution:
    theta: np.ndarray
    lam: float


def _spd_solve(A, b):
    """Cholesky solve with one step of iterative refinement."""
    try:
        c = cho_factor(A)
    except LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]
    x = cho_solve(c, b)
    return x + cho_solve(c, b - A @ x)


def krr_solve_features(Phi, y, lam: float, path: str = "auto") -> KrrSolution:
    """theta = Phi^T (Phi Phi^T + lam I)^{-1} y, or the D x D normal equations."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    Phi = np.asarray(Phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, D = Phi.shape
    if n < 1:
        raise ValueError("need at least one sample")
    if path == "auto":
        path = "primal" if D < n else "gram"
    if path == "gram":
        K = Phi @ Phi.T
        K[np.diag_indices_from(K)] += lam
        theta = Phi.T @ _spd_solve(K, y)
    else:
        A = Phi.T @ Phi
        A[np.diag_indices_from(A)] += lam
        theta = _spd_solve(A, Phi.T @ y)
    return KrrSolution(theta, lam)


def krr_solve(S: Dataset, lam: float, fmap, path: str = "auto") -> KrrSolution:
    return krr_solve_features(fmap.featurize_batch(S.inputs), S.labels, lam, path)


def kip_objective(S: Dataset, original: Dataset, lam: float, fmap) -> float:
    """Sum over O of squared residuals of the ridge model fitted on S."""
    sol = krr_solve(S, lam, fmap)
    r = np.asarray(original.labels, dtype=np.float64) - fmap.featurize_batch(original.inputs) @ sol.theta
    return float(r @ r)


def kip_gradient(X_s, y_s, Phi_o, y_o, lam, fmap):
    """KIP loss and its gradient with respect to X_S (D x D normal-equation form)."""
    y_s = np.asarray(y_s, dtype=np.float64)
    Phi, cache = fmap.forward(X_s)
    A = Phi.T @ Phi
    A[np.diag_indices_from(A)] += lam
    theta = _spd_solve(A, Phi.T @ y_s)
    r = y_o - Phi_o @ theta
    g_theta = -2.0 * Phi_o.T @ r
    u = _spd_solve(A, g_theta)
    dPhi = np.outer(y_s, u) - Phi @ (np.outer(theta, u) + np.outer(u, theta))
    return float(r @ r), fmap.backward(cache, dPhi), theta


def kip_distill(original: Dataset, cfg: DistillConfig, fmap, test: Optional[Dataset] = None):
    """Minimize the KIP objective over the synthetic inputs (labels fixed).

    Only for linear / random_fourier maps with out_dim <= 512. The history's
    ``gap`` field holds the KIP loss.
    """
    kind = fmap.spec.kind
    if kind not in ("linear", "random_fourier") or fmap.out_dim > MAX_KIP_DIM:
        raise ValueError("KIP training is limited to linear/random_fourier maps with out_dim <= 512")
    S = init_synthetic(original, cfg)
    X = S.inputs.copy()
    y = S.labels.astype(np.float64)
    lam = cfg.lam_for(X.shape[0])
    Phi_o = fmap.featurize_batch(original.inputs)
    y_o = original.labels.astype(np.float64)
    Phi_test = fmap.featurize_batch(test.inputs) if test is not None else None
    state = OptimizerState.zeros(X.size)
    history = DistillHistory(lam=lam)
    best, best_X = np.inf, X.copy()
    for step in range(cfg.steps):
        loss, dX, theta = kip_gradient(X, y, Phi_o, y_o, lam, fmap)
        if loss < best:
            best, best_X = loss, X.copy()
        rec = StepRecord(step, loss, None, best)
        if Phi_test is not None and cfg.retrain_every and (step % cfg.retrain_every == 0 or step == cfg.steps - 1):
            rec.test_accuracy = accuracy(theta, Phi_test, test.labels)
        history.records.append(rec)
        if step == cfg.steps - 1:
            break
        X = adabelief_step(state, X.ravel(), dX.ravel(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        X = np.clip(X.reshape(best_X.shape), 0.0, 1.0)
    return Dataset(best_X, S.labels.copy(), S.class_names, S.image_shape), history
