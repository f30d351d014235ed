import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dgkip.bounds import (
    BOUNDS_COLUMNS, ball_min_linear, error_bounds_from_features, half_widths,
    prediction_interval, test_error_bounds as error_bounds, write_bounds_csv,
)
from dgkip.data import Dataset
from dgkip.features import FeatureSpec, build_feature_map
from dgkip.solver import SolveConfig, duality_gap, train_primal

LIN2 = build_feature_map(FeatureSpec("linear", input_dim=2))
EXACT = SolveConfig(gap_tol_per_sample=0.0, kkt_tol=1e-12, max_epochs=100000)


def sample_ball(rng, c, r, k):
    """k points uniform in the ball |v - c| <= r, plus points on its surface."""
    d = c.size
    z = rng.normal(size=(k, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    radii = r * rng.random(k) ** (1.0 / d)
    radii[: k // 2] = r
    return c + z * radii[:, None]


def test_interval_examples():
    theta = np.array([0.5, -2.0])
    iv = prediction_interval(np.array([1.0, 1.0]), theta, 0.0, 1.0, LIN2)
    assert iv.lower == iv.upper == iv.center == -1.5
    iv = prediction_interval(np.zeros(2), theta, 10.0, 1.0, LIN2)
    assert iv.half_width == 0.0
    iv = prediction_interval(np.array([3.0, 4.0]), theta, 2.0, 1.0, LIN2)
    assert iv.half_width == pytest.approx(5.0 * 2.0)
    assert iv.lower <= iv.upper


def test_gap_zero_report():
    Phi = np.array([[1.0], [-1.0], [0.0], [2.0]])
    y = np.array([1, 1, -1, -1])
    rep = error_bounds_from_features(Phi, y, np.array([1.0]), 0.0, 1.0)
    assert rep.n_unk == 0
    # margins 1, -1, 0 (counted wrong), -2
    assert rep.n_mis == 3 and rep.lower == rep.upper == 0.75


def test_huge_gap_report(rng):
    Phi = rng.normal(size=(20, 3)) + 0.1
    y = rng.choice([-1, 1], 20)
    rep = error_bounds_from_features(Phi, y, rng.normal(size=3), 1e12, 1.0)
    assert rep.n_cor == rep.n_mis == 0 and (rep.lower, rep.upper) == (0.0, 1.0)


def test_report_errors():
    with pytest.raises(ValueError):
        error_bounds_from_features(np.zeros((0, 2)), np.zeros(0), np.zeros(2), 0.0, 1.0)
    with pytest.raises(ValueError):
        error_bounds_from_features(np.ones((1, 2)), np.array([0]), np.zeros(2), 0.0, 1.0)


def test_csv_row(tmp_path):
    rep = error_bounds_from_features(np.eye(2), np.array([1, -1]), np.array([1.0, 1.0]), 0.1, 0.3)
    write_bounds_csv(rep, tmp_path / "b.csv")
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert tuple(rows[0]) == BOUNDS_COLUMNS and len(rows) == 2
    assert float(rows[1][7]) == rep.radius


@pytest.mark.parametrize("loss", ["logistic", "hinge"])
def test_sandwich_against_retraining(loss):
    rng = np.random.default_rng(7)
    for _ in range(100):
        n, d = int(rng.integers(2, 12)), 3
        X_o = rng.random((40, d))
        y_o = np.where(X_o @ np.array([1.0, -1.0, 0.5]) > 0.25, 1, -1)
        X_s = rng.random((n, d))
        y_s = rng.choice([-1, 1], n)
        lam = 0.05
        theta_o = train_primal(loss, X_o, y_o, 0.1).theta
        gap = duality_gap(loss, theta_o, X_s, y_s, lam).gap
        theta_s = train_primal(loss, X_s, y_s, lam, EXACT).theta
        X_t = rng.random((30, d))
        y_t = rng.choice([-1, 1], 30)
        w = half_widths(X_t, gap, lam)
        f_o, f_s = X_t @ theta_o, X_t @ theta_s
        assert np.all(np.abs(f_s - f_o) <= w + 1e-9)
        rep = error_bounds(Dataset(X_t, y_t), theta_o, gap, lam, build_feature_map(FeatureSpec("linear", input_dim=d)))
        err = np.mean(y_t * f_s <= 0)
        assert rep.lower - 1e-12 <= err <= rep.upper + 1e-12
        assert rep.n_cor + rep.n_mis + rep.n_unk == rep.n_test


@given(st.integers(0, 10_000), st.floats(1e-6, 10), st.floats(0.01, 0.99))
def test_shrinking_gap_is_monotone(seed, gap, shrink):
    rng = np.random.default_rng(seed)
    Phi = rng.normal(size=(25, 3))
    y = rng.choice([-1, 1], 25)
    theta = rng.normal(size=3)
    big = error_bounds_from_features(Phi, y, theta, gap, 1.0)
    small = error_bounds_from_features(Phi, y, theta, gap * shrink, 1.0)
    assert small.n_cor >= big.n_cor and small.n_mis >= big.n_mis
    assert 0 <= big.lower <= big.upper <= 1


def test_ball_extremum_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = int(rng.integers(1, 6))
        a, c, r = rng.normal(size=d), rng.normal(size=d), float(rng.random() * 3)
        value, v = ball_min_linear(a, c, r)
        assert value == pytest.approx(a @ c - r * np.linalg.norm(a))
        samples = sample_ball(rng, c, r, 20000)
        assert np.min(samples @ a) >= value - 1e-9
        assert abs(a @ v - value) <= 1e-6 and np.linalg.norm(v - c) <= r + 1e-12
