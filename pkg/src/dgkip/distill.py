"""Synthetic-set optimization by minimizing the duality gap at theta_O.

For a synthetic set S = (X_S, y_S) and fixed theta_O the objective is

    G(S) = sum_i g(m_i) + lam/2 |theta_O|^2 + 1/(2 lam) |v|^2 + sum_i g*(-a_i)

with f_i = theta_O . phi(x_i), m_i = y_i f_i, a_i = dual_m(m_i) and
v = sum_i a_i y_i phi(x_i). Gradients flow through the loss, the dual map
(unless ``detach_alpha``), the quadratic term, and the feature map.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .data import Dataset
from .losses import LossFamily, as_family
from .solver import SolveConfig, accuracy, default_lambda, gap_radius, train_primal

log = logging.getLogger(__name__)

INIT_STRATEGIES = ("real_sample", "gaussian_noise", "class_mean_noise")

# retraining oracle: solve S's problem to machine precision
ORACLE_SOLVE = SolveConfig(max_iters=500, gap_tol_per_sample=0.0, kkt_tol=1e-11, max_epochs=200000)


class DistillDiverged(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class DistillConfig:
    ipc: int = 1
    init_strategy: str = "real_sample"
    steps: int = 1000
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-16
    lambda_scale: float = 1e-6
    lam: Optional[float] = None  # overrides n_S * lambda_scale
    retrain_every: int = 50
    seed: int = 0
    learn_labels: bool = False
    detach_alpha: bool = False
    early_stop_window: int = 50
    early_stop_tol: float = 1e-6

    def __post_init__(self):
        if self.ipc < 1 or self.steps < 1:
            raise ValueError("ipc and steps must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"init_strategy must be one of {INIT_STRATEGIES}")

    def lam_for(self, n_s: int) -> float:
        return self.lam if self.lam is not None else default_lambda(n_s, self.lambda_scale)


@dataclass
class OptimizerState:
    m: np.ndarray
    s: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "OptimizerState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adabelief_step(state: OptimizerState, params, grad, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-16):
    """One AdaBelief update; ``state`` is updated in place."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.m.shape or np.shape(params) != state.m.shape:
        raise ValueError("gradient / parameter shape does not match optimizer state")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.s = beta2 * state.s + (1 - beta2) * (g - state.m) ** 2 + eps
    m_hat = state.m / (1 - beta1 ** state.t)
    s_hat = state.s / (1 - beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(s_hat) + eps)


@dataclass
class StepRecord:
    step: int
    gap: float
    radius_over_theta_norm: float
    best_gap: float
    deviation_over_theta_norm: Optional[float] = None
    test_accuracy: Optional[float] = None


@dataclass
class DistillHistory:
    records: List[StepRecord] = field(default_factory=list)
    lam: float = 0.0
    theta_norm: float = 0.0
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    @property
    def best_gap(self) -> float:
        return self.records[-1].best_gap if self.records else float("inf")


HISTORY_COLUMNS = ("step", "gap", "radius_over_theta_norm", "deviation_over_theta_norm", "test_accuracy")


def _fmt(v):
    return "" if v is None else f"{v:.17g}"


def write_history_csv(history: DistillHistory, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for r in history.records:
            w.writerow([r.step, _fmt(r.gap), _fmt(r.radius_over_theta_norm),
                        _fmt(r.deviation_over_theta_norm), _fmt(r.test_accuracy)])


def init_synthetic(original: Dataset, cfg: DistillConfig) -> Dataset:
    """ipc rows labelled +1 followed by ipc rows labelled -1."""
    original.check_binary()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    X, y = original.inputs, original.labels
    rows, labels = [], []
    for sign in (1, -1):
        cls = np.flatnonzero(y == sign)
        if cfg.init_strategy == "real_sample":
            if cls.size < cfg.ipc:
                raise ValueError(f"class {sign:+d} has {cls.size} samples, need ipc={cfg.ipc}")
            rows.append(X[np.sort(rng.choice(cls, size=cfg.ipc, replace=False))])
        elif cfg.init_strategy == "gaussian_noise":
            rows.append(np.clip(0.5 + 0.25 * rng.standard_normal((cfg.ipc, X.shape[1])), 0, 1))
        else:
            if cls.size == 0:
                raise ValueError(f"class {sign:+d} is empty")
            mean = X[cls].mean(axis=0)
            rows.append(np.clip(mean + 0.1 * rng.standard_normal((cfg.ipc, X.shape[1])), 0, 1))
        labels.append(np.full(cfg.ipc, sign, dtype=np.int8))
    return Dataset(np.concatenate(rows), np.concatenate(labels), original.class_names, original.image_shape)


def gap_objective(X_s, y_s, theta_o, lam, loss, fmap):
    """Duality gap G_S(theta_O, alpha~_S) and a cache for :func:`gap_gradient`."""
    fam = as_family(loss)
    y = np.asarray(y_s, dtype=np.float64)
    Phi, fcache = fmap.forward(X_s)
    f = Phi @ theta_o
    m = y * f
    alpha = fam.dual_m(m)
    v = Phi.T @ (alpha * y)
    if fam.kind == "logistic":
        # Fenchel-Young holds with equality for a = sigmoid(-m), which collapses
        # the gap to |lam theta - v|^2 / (2 lam) without cancellation.
        r = lam * theta_o - v
        gap = float(r @ r) / (2.0 * lam)
    else:
        gap = float(
            np.sum(fam.value_m(m)) + 0.5 * lam * (theta_o @ theta_o)
            + (v @ v) / (2.0 * lam) + np.sum(fam.conj_at_dual_m(m))
        )
    cache = dict(Phi=Phi, fcache=fcache, f=f, m=m, alpha=alpha, v=v, y=y)
    return gap, cache


def gap_gradient(X_s, y_s, theta_o, lam, loss, fmap, detach_alpha=False, cache=None):
    """Return (gap, dG/dX_S, dG/dy_S)."""
    fam = as_family(loss)
    if cache is None:
        gap, cache = gap_objective(X_s, y_s, theta_o, lam, fam, fmap)
    else:
        gap = cache["gap"]
    Phi, f, m, alpha, v, y = (cache[k] for k in ("Phi", "f", "m", "alpha", "v", "y"))
    q = (Phi @ v) / lam
    dG_dm = fam.deriv_m(m)
    if not detach_alpha:
        dG_dm = dG_dm + (fam.conj_deriv_at_dual_m(m) + y * q) * fam.dual_deriv_m(m)
    dPhi = np.outer(dG_dm * y, theta_o) + np.outer(alpha * y / lam, v)
    dX = fmap.backward(cache["fcache"], dPhi)
    dy = dG_dm * f + alpha * q
    return gap, dX, dy


def _retrain(fam, Phi, y, lam):
    return train_primal(fam, Phi, y, lam, ORACLE_SOLVE)


def distill(
    original: Dataset,
    theta_o,
    cfg: DistillConfig,
    fmap,
    loss="logistic",
    test: Optional[Dataset] = None,
    callback: Optional[Callable] = None,
    init: Optional[Dataset] = None,
):
    """Run the distillation loop and return (best-gap S, history).

    Each step recomputes the dual variables from theta_O, takes an AdaBelief
    step on the synthetic inputs (and labels when learned) and clips inputs
    to [0, 1]. Every ``retrain_every`` steps (and at the last step) a model
    is retrained on S to record the true deviation and test accuracy;
    ``callback(step, S, model, gap)`` is invoked there.
    """
    fam = as_family(loss)
    theta_o = np.asarray(theta_o, dtype=np.float64)
    S = init if init is not None else init_synthetic(original, cfg)
    X = S.inputs.copy()
    y = S.labels.astype(np.float64).copy()
    n_s = X.shape[0]
    lam = cfg.lam_for(n_s)
    theta_norm = float(np.linalg.norm(theta_o)) or 1.0
    Phi_test = fmap.featurize_batch(test.inputs) if test is not None else None

    history = DistillHistory(lam=lam, theta_norm=theta_norm)
    size = X.size + (n_s if cfg.learn_labels else 0)
    state = OptimizerState.zeros(size)
    best_gap, best = np.inf, (X.copy(), y.copy())

    def make_ds(Xa, ya):
        labels = ya if cfg.learn_labels else ya.astype(np.int8)
        return Dataset(Xa.copy(), labels.copy(), S.class_names, S.image_shape)

    for step in range(cfg.steps):
        gap, cache = gap_objective(X, y, theta_o, lam, fam, fmap)
        if not np.isfinite(gap):
            raise DistillDiverged(f"non-finite gap at step {step}", history)
        cache["gap"] = gap
        _, dX, dy = gap_gradient(X, y, theta_o, lam, fam, fmap, cfg.detach_alpha, cache)
        if gap < best_gap:
            best_gap, best = gap, (X.copy(), y.copy())
        rec = StepRecord(step, gap, gap_radius(gap, lam) / theta_norm, best_gap)
        last = step == cfg.steps - 1
        if cfg.retrain_every and (step % cfg.retrain_every == 0 or last):
            model = _retrain(fam, cache["Phi"], y, lam)
            rec.deviation_over_theta_norm = float(np.linalg.norm(theta_o - model.theta)) / theta_norm
            if Phi_test is not None:
                rec.test_accuracy = accuracy(model.theta, Phi_test, test.labels)
            if callback is not None:
                callback(step, make_ds(X, y), model, gap)
        history.records.append(rec)

        w = cfg.early_stop_window
        if w and cfg.early_stop_tol > 0 and step >= w:
            prev = history.records[step - w].best_gap
            if prev - best_gap <= cfg.early_stop_tol * prev:
                history.stopped_early = True
                log.info("early stop at step %d (best gap %.3e)", step, best_gap)
                break
        if last:
            break

        params = X.ravel() if not cfg.learn_labels else np.concatenate([X.ravel(), y])
        grad = dX.ravel() if not cfg.learn_labels else np.concatenate([dX.ravel(), dy])
        params = adabelief_step(state, params, grad, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        X = np.clip(params[:X.size].reshape(X.shape), 0.0, 1.0)
        if cfg.learn_labels:
            y = np.clip(params[X.size:], -1.0, 1.0)

    return make_ds(*best), history
