"""Certified consequences of a duality gap G on a synthetic set.

Any model theta_S* trained on S lies in the ball |theta - theta_O| <= r with
r = sqrt(2 G / lam). Predictions therefore move by at most
|phi(x)| * r, and each test point is certifiably correct, certifiably wrong,
or undetermined.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .solver import gap_radius


@dataclass(frozen=True)
class PredictionInterval:
    center: float
    half_width: float

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width


@dataclass(frozen=True)
class ErrorBoundReport:
    n_test: int
    n_cor: int
    n_mis: int
    n_unk: int
    lower: float
    upper: float
    gap: float
    radius: float


def half_widths(Phi, gap: float, lam: float) -> np.ndarray:
    """sqrt(k(x,x) * 2G/lam) for each row of Phi."""
    r = gap_radius(gap, lam)
    return np.sqrt(np.einsum("ij,ij->i", Phi, Phi)) * r


def prediction_interval(x, theta_o, gap: float, lam: float, fmap) -> PredictionInterval:
    phi = fmap.featurize(x)
    return PredictionInterval(float(phi @ theta_o), float(np.linalg.norm(phi) * gap_radius(gap, lam)))


def ball_min_linear(a, c, r: float):
    """min of a.v over the ball |v - c| <= r: returns (value, minimizer)."""
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if r < 0:
        raise ValueError("radius must be non-negative")
    na = float(np.linalg.norm(a))
    if na == 0.0:
        return 0.0, c.copy()
    return float(a @ c) - r * na, c - (r / na) * a


def classify_margins(margins, widths):
    """Return (cor, mis, unk) boolean masks.

    Strict inequalities decide cor/mis; with a zero-width interval a margin of
    exactly 0 counts as misclassified.
    """
    lo = margins - widths
    hi = margins + widths
    cor = lo > 0
    mis = (hi < 0) | ((widths == 0) & (margins <= 0))
    unk = ~(cor | mis)
    return cor, mis, unk


def error_bounds_from_features(Phi, y, theta_o, gap: float, lam: float) -> ErrorBoundReport:
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n == 0:
        raise ValueError("empty test set")
    if np.any(np.abs(y) != 1):
        raise ValueError("test labels must be -1 or +1")
    widths = half_widths(Phi, gap, lam)
    cor, mis, unk = classify_margins(y * (Phi @ theta_o), widths)
    n_cor, n_mis, n_unk = int(cor.sum()), int(mis.sum()), int(unk.sum())
    return ErrorBoundReport(n, n_cor, n_mis, n_unk, n_mis / n, (n_mis + n_unk) / n, float(max(gap, 0.0)), gap_radius(gap, lam))


def test_error_bounds(test_set, theta_o, gap: float, lam: float, fmap) -> ErrorBoundReport:
    """n_mis/n' <= TeEr(theta_S*) <= (n_mis + n_unk)/n' for every S with this gap."""
    return error_bounds_from_features(fmap.featurize_batch(test_set.inputs), test_set.labels, theta_o, gap, lam)


test_error_bounds.__test__ = False  # not a pytest test despite the name

BOUNDS_COLUMNS = ("n_test", "n_cor", "n_mis", "n_unk", "lower", "upper", "gap", "radius")


def write_bounds_csv(report: ErrorBoundReport, path) -> None:
    row = asdict(report)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BOUNDS_COLUMNS)
        w.writerow([row[k] if isinstance(row[k], int) else f"{row[k]:.17g}" for k in BOUNDS_COLUMNS])
