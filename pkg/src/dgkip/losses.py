"""Logistic and hinge losses in margin form, their conjugates and dual maps.

Both losses are written as l(y, f) = g(y * f). The conjugate term that enters
the dual objective is g*(-alpha), which does not depend on y:

    logistic: g(m) = log(1 + exp(-m)),  g*(-a) = a log a + (1 - a) log(1 - a)
    hinge:    g(m) = max(0, 1 - m),     g*(-a) = -a

with a in [0, 1] in both cases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, xlogy

LOSS_KINDS = ("logistic", "hinge")


def _softplus(z):
    return np.logaddexp(0.0, z)


@dataclass(frozen=True)
class LossFamily:
    kind: str = "logistic"
    # only used by the hinge dual map
    smooth_temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; choose from {LOSS_KINDS}")
        if not self.smooth_temperature > 0:
            raise ValueError("smooth_temperature must be positive")

    def other(self) -> "LossFamily":
        return LossFamily("hinge" if self.kind == "logistic" else "logistic", self.smooth_temperature)

    # -- margin-level primitives (vectorized) --------------------------------

    def value_m(self, m):
        m = np.asarray(m, dtype=np.float64)
        if self.kind == "logistic":
            return _softplus(-m)
        return np.maximum(0.0, 1.0 - m)

    def deriv_m(self, m):
        m = np.asarray(m, dtype=np.float64)
        if self.kind == "logistic":
            return -expit(-m)
        return np.where(m < 1.0, -1.0, 0.0)

    def dual_m(self, m):
        """Dual variable built from the margin (KKT map, smoothed for hinge)."""
        m = np.asarray(m, dtype=np.float64)
        if self.kind == "logistic":
            return expit(-m)
        return expit((1.0 - m) / self.smooth_temperature)

    def dual_deriv_m(self, m):
        m = np.asarray(m, dtype=np.float64)
        if self.kind == "logistic":
            return -expit(m) * expit(-m)
        z = (1.0 - m) / self.smooth_temperature
        return -expit(z) * expit(-z) / self.smooth_temperature

    def exact_dual_m(self, m):
        """A selection from -dg(m); for hinge the kink value is 1/2."""
        m = np.asarray(m, dtype=np.float64)
        if self.kind == "logistic":
            return expit(-m)
        return np.where(m < 1.0, 1.0, np.where(m > 1.0, 0.0, 0.5))

    def conj(self, alpha):
        a = np.asarray(alpha, dtype=np.float64)
        if np.any(a < 0.0) or np.any(a > 1.0) or np.any(~np.isfinite(a)):
            raise ValueError("dual variable outside [0, 1]")
        if self.kind == "logistic":
            return xlogy(a, a) + xlogy(1.0 - a, 1.0 - a)
        return -a

    def conj_at_dual_m(self, m):
        """conj(dual_m(m)) without cancellation for large |m|."""
        m = np.asarray(m, dtype=np.float64)
        if self.kind == "logistic":
            return -expit(-m) * _softplus(m) - expit(m) * _softplus(-m)
        return -self.dual_m(m)

    def conj_deriv_at_dual_m(self, m):
        """d conj / d alpha evaluated at alpha = dual_m(m)."""
        m = np.asarray(m, dtype=np.float64)
        if self.kind == "logistic":
            # logit(sigmoid(-m)) = -m
            return -m
        return np.full_like(m, -1.0)


def as_family(family) -> LossFamily:
    if isinstance(family, LossFamily):
        return family
    return LossFamily(str(family))


def _finite(f):
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite prediction")
    return f


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.abs(y) > 1.0):
        raise ValueError("labels must lie in [-1, 1]")
    return y


def loss(family, y, f):
    fam = as_family(family)
    out = fam.value_m(_check_labels(y) * _finite(f))
    return float(out) if np.ndim(out) == 0 else out


def conjugate(family, alpha):
    out = as_family(family).conj(alpha)
    return float(out) if np.ndim(out) == 0 else out


def dual_var(family, y, f):
    fam = as_family(family)
    out = fam.dual_m(_check_labels(y) * _finite(f))
    return float(out) if np.ndim(out) == 0 else out
