"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from dgkip.bounds import ball_min_linear, error_bounds_from_features, half_widths
from dgkip.cli import main
from dgkip.data import Dataset, SplitSpec, binarize, load_idx, make_blobs, save_csv, split
from dgkip.distill import ORACLE_SOLVE, DistillConfig, distill, gap_gradient, gap_objective
from dgkip.features import FeatureSpec, build_feature_map
from dgkip.kip import krr_solve
from dgkip.losses import LossFamily
from dgkip.pipeline import transfer_accuracies
from dgkip.solver import (
    SolveConfig, accuracy, default_lambda, dual_value, duality_gap, primal_value, train_primal,
)

from helpers import central_diff, kink_free, rel_err, report

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist01"
EXACT = SolveConfig(gap_tol_per_sample=0.0, kkt_tol=1e-12, max_epochs=200000, max_iters=500)


def _random_triple(rng):
    n = int(rng.integers(1, 51))
    d = int(rng.integers(1, 11))
    Phi = rng.normal(size=(n, d))
    y = rng.choice([-1.0, 1.0], size=n)
    return Phi, y


def test_criterion_1_duality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    weak_bad = 0
    worst = {"logistic": 0.0, "hinge": 0.0}
    worst_exact_hinge = 0.0
    trials = 1000
    for loss in ("logistic", "hinge"):
        for _ in range(trials):
            Phi, y = _random_triple(rng)
            n, d = Phi.shape
            lam = default_lambda(n)
            theta = rng.normal(size=d) * rng.uniform(0, 5)
            alpha = rng.random(n)
            if dual_value(loss, alpha, Phi, y, lam) > primal_value(loss, theta, Phi, y, lam):
                weak_bad += 1
            model = train_primal(loss, Phi, y, lam)
            rep = duality_gap(loss, model.theta, Phi, y, lam)  # smoothed alpha~ for hinge
            worst[loss] = max(worst[loss], rep.gap / n)
            if loss == "hinge":
                cert = duality_gap(loss, model.theta, Phi, y, lam, alpha=model.alpha)
                worst_exact_hinge = max(worst_exact_hinge, cert.gap / n)
    elapsed = time.perf_counter() - t0
    ok = weak_bad == 0 and worst["logistic"] <= 1e-8 and worst["hinge"] <= 1e-5 and elapsed < 30
    report(1, ok, f"{2 * trials} triples, weak-duality violations={weak_bad}, "
                  f"max gap/n logistic={worst['logistic']:.3g} (<=1e-8), "
                  f"hinge smoothed={worst['hinge']:.3g} (<=1e-5), "
                  f"hinge with solver dual={worst_exact_hinge:.3g}, {elapsed:.1f}s (<30s)")
    assert ok


def test_criterion_2_parameter_ball():
    t0 = time.perf_counter()
    O = make_blobs(200, seed=0)
    rng = np.random.default_rng(99)
    passes, total = 0, 0
    for loss in ("logistic", "hinge"):
        theta_o = train_primal(loss, O.inputs, O.labels, default_lambda(O.n)).theta
        for _ in range(100):
            n_s = int(rng.integers(2, 21))
            X = rng.random((n_s, 2))
            y = rng.choice([-1.0, 1.0], n_s)
            lam = default_lambda(n_s)
            gap = duality_gap(loss, theta_o, X, y, lam).gap
            theta_s = train_primal(loss, X, y, lam, EXACT).theta
            total += 1
            passes += np.sum((theta_o - theta_s) ** 2) <= 2 * gap / lam + 1e-9
    elapsed = time.perf_counter() - t0
    ok = passes == total and elapsed < 60
    report(2, ok, f"{passes}/{total} synthetic sets satisfy the parameter-ball bound "
                  f"(100 per loss), {elapsed:.1f}s (<60s)")
    assert ok


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    limits = {"linear": 1e-6, "random_fourier": 1e-4, "random_mlp": 1e-4}
    worst = {}
    for kind, tol in limits.items():
        fmap = build_feature_map(FeatureSpec(kind, input_dim=5, out_dim=32, nets=2, widths=(16, 16), seed=1))
        errs = []
        while len(errs) < 50:
            loss = ("logistic", "hinge")[len(errs) % 2]
            n_s = int(rng.integers(2, 7))
            X = rng.random((n_s, 5))
            y = np.repeat([1.0, -1.0], [n_s // 2, n_s - n_s // 2])
            theta = rng.normal(size=fmap.out_dim)
            lam = default_lambda(n_s)
            if not kink_free(fmap, X):
                continue
            if loss == "hinge" and np.any(np.abs(y * (fmap.featurize_batch(X) @ theta) - 1) < 1e-3):
                continue
            _, dX, _ = gap_gradient(X, y, theta, lam, loss, fmap)
            fd = central_diff(lambda Z: gap_objective(Z, y, theta, lam, loss, fmap)[0], X.copy())
            errs.append(rel_err(dX, fd))
        worst[kind] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(worst[k] < limits[k] for k in limits) and elapsed < 60
    detail = ", ".join(f"{k} max rel err={worst[k]:.2g} (<{limits[k]:g})" for k in limits)
    report(3, ok, f"50 instances per map: {detail}, {elapsed:.1f}s (<60s)")
    assert ok


def test_criterion_4_sandwich():
    t0 = time.perf_counter()
    O, test = make_blobs(200, seed=0), make_blobs(200, seed=1)
    violations, checked = 0, 0
    for loss in ("logistic", "hinge"):
        theta_o = train_primal(loss, O.inputs, O.labels, default_lambda(O.n)).theta
        Phi_t = test.inputs
        f_o = Phi_t @ theta_o
        for ipc in (1, 5):
            cfg = DistillConfig(ipc=ipc, steps=500, retrain_every=50, early_stop_window=0)
            lam = cfg.lam_for(2 * ipc)

            def check(step, S, model, gap):
                nonlocal violations, checked
                rep = error_bounds_from_features(Phi_t, test.labels, theta_o, gap, lam)
                err = np.mean(test.labels * (Phi_t @ model.theta) <= 0)
                w = half_widths(Phi_t, gap, lam)
                violations += int(not (rep.lower <= err <= rep.upper))
                violations += int(np.sum(np.abs(Phi_t @ model.theta - f_o) > w + 1e-9))
                checked += 1

            distill(O, theta_o, cfg, build_feature_map(FeatureSpec("linear", input_dim=2)), loss, callback=check)
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and checked == 44 and elapsed < 120
    report(4, ok, f"{checked} checkpoints over 500-step trajectories (2 losses x ipc 1,5), "
                  f"violations={violations}, {elapsed:.1f}s (<120s)")
    assert ok


# -- desk-scale MNIST 0 vs 1 ---------------------------------------------------


def _mnist():
    ds = binarize(load_idx(MNIST_DIR / "images-idx3-ubyte.gz", MNIST_DIR / "labels-idx1-ubyte.gz"), 0, 1)
    train, test = split(ds, SplitSpec(2000 / ds.n, None, 0))
    fmap = build_feature_map(FeatureSpec("random_mlp", input_dim=784, seed=0, nets=4, widths=(128, 128, 128)))
    return train, test, fmap


@pytest.fixture(scope="module")
def mnist_runs():
    t0 = time.perf_counter()
    train, test, fmap = _mnist()
    Phi = fmap.featurize_batch(train.inputs)
    runs = {}
    for loss in ("logistic", "hinge"):
        t1 = time.perf_counter()
        model = train_primal(loss, Phi, train.labels, default_lambda(train.n))
        cfg = DistillConfig(ipc=10, steps=1000, retrain_every=50, early_stop_window=0, seed=0)
        S, history = distill(train, model.theta, cfg, fmap, loss, test=test)
        runs[loss] = dict(model=model, S=S, history=history, seconds=time.perf_counter() - t1)
    return dict(train=train, test=test, fmap=fmap, runs=runs, setup=time.perf_counter() - t0)


def test_criterion_5_gap_curves(mnist_runs):
    run = mnist_runs["runs"]["logistic"]
    h = run["history"]
    radius = h.column("radius_over_theta_norm")
    smooth = np.convolve(radius, np.ones(50) / 50, mode="valid")
    drop = 1 - smooth[-1] / smooth[0]
    dev = h.column("deviation_over_theta_norm")
    at = ~np.isnan(dev)
    below = bool(np.all(dev[at] < radius[at]))
    acc = h.column("test_accuracy")
    final_acc = acc[~np.isnan(acc)][-1]
    monotone = bool(np.all(np.diff(smooth) <= 0))
    train, test = mnist_runs["train"], mnist_runs["test"]
    seconds = run["seconds"]
    ok = drop >= 0.9 and below and final_acc >= 0.99 and seconds < 600
    report(5, ok, f"MNIST 0/1 n_O={train.n} n_test={test.n}, random_mlp 4x128, ipc=10, 1000 steps: "
                  f"smoothed radius/|theta_O| {smooth[0]:.4g} -> {smooth[-1]:.4g} (drop {100 * drop:.2f}%, need >=90%; "
                  f"strictly monotone={monotone}), deviation<radius at {at.sum()} checkpoints={below}, "
                  f"retrained test acc={final_acc:.4f} (>=0.99), {seconds:.1f}s (<600s)")
    assert ok


def test_criterion_6_krr():
    t0 = time.perf_counter()
    from scipy.sparse.linalg import cg

    rng = np.random.default_rng(6)
    worst = 0.0
    for i in range(100):
        n, d = int(rng.integers(1, 40)), int(rng.integers(1, 8))
        kind = ("linear", "random_fourier")[i % 2]
        fmap = build_feature_map(FeatureSpec(kind, input_dim=d, out_dim=int(rng.integers(1, 60)), seed=i))
        S = Dataset(rng.random((n, d)), rng.choice([-1, 1], n))
        lam = float(rng.uniform(1e-2, 2))
        Phi = fmap.featurize_batch(S.inputs)
        ref, info = cg(Phi.T @ Phi + lam * np.eye(fmap.out_dim), Phi.T @ S.labels, rtol=1e-14, atol=0, maxiter=100000)
        assert info == 0
        worst = max(worst, float(np.max(np.abs(krr_solve(S, lam, fmap).theta - ref))))
    one = krr_solve(Dataset(np.array([[1.0]]), np.array([1])), 1.0, build_feature_map(FeatureSpec("linear", input_dim=1)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and one.theta[0] == 0.5 and elapsed < 10
    report(6, ok, f"100 instances vs conjugate-gradient ridge, max |diff|={worst:.2g} (<=1e-6); "
                  f"1-point theta={one.theta[0]!r} (exactly 0.5), {elapsed:.2f}s (<10s)")
    assert ok


def test_criterion_7_ball_extremum():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    valid = attained = 0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        a, c, r = rng.normal(size=d), rng.normal(size=d), float(rng.uniform(0, 3))
        bound, v = ball_min_linear(a, c, r)
        z = rng.normal(size=(100000, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        pts = c + z * (r * rng.random(100000) ** (1 / d))[:, None]
        valid += np.min(pts @ a) >= bound - 1e-9
        attained += abs(a @ v - bound) <= 1e-6 and np.linalg.norm(v - c) <= r * (1 + 1e-12)
    elapsed = time.perf_counter() - t0
    ok = valid == 100 and attained == 100 and elapsed < 10
    report(7, ok, f"valid lower bound {valid}/100, attained {attained}/100 "
                  f"(1e5 samples each), {elapsed:.2f}s (<10s)")
    assert ok


def test_criterion_8_transfer(mnist_runs):
    t0 = time.perf_counter()
    rows = []
    O, test = make_blobs(200, seed=0), make_blobs(200, seed=1)
    lin = build_feature_map(FeatureSpec("linear", input_dim=2))
    for loss in ("logistic", "hinge"):
        fam = LossFamily(loss)
        theta_o = train_primal(fam, O.inputs, O.labels, default_lambda(O.n)).theta
        S, _ = distill(O, theta_o, DistillConfig(ipc=1, steps=500, early_stop_window=0), lin, fam)
        r = transfer_accuracies(S, test, lin, fam, default_lambda(S.n))
        rows.append(("blobs", loss, r["same"], r["cross"]))
    for loss, run in mnist_runs["runs"].items():
        S = run["S"]
        r = transfer_accuracies(S, mnist_runs["test"], mnist_runs["fmap"], LossFamily(loss), default_lambda(S.n))
        rows.append(("mnist01", loss, r["same"], r["cross"]))
    elapsed = time.perf_counter() - t0 + sum(run["seconds"] for run in mnist_runs["runs"].values())
    ok = all(abs(same - cross) <= 0.03 for _, _, same, cross in rows) and elapsed < 600
    detail = "; ".join(f"{ds} {src}->other: same={same:.4f} cross={cross:.4f}" for ds, src, same, cross in rows)
    report(8, ok, f"{detail} (|diff|<=0.03), {elapsed:.1f}s (<600s)")
    assert ok


def test_criterion_9_determinism(tmp_path):
    t0 = time.perf_counter()
    save_csv(make_blobs(200, seed=0), tmp_path / "train.csv")
    save_csv(make_blobs(200, seed=1), tmp_path / "test.csv")
    base = ["--train", str(tmp_path / "train.csv"), "--test", str(tmp_path / "test.csv"),
            "--set", "data.classes=1,-1", "--seed", "3", "--steps", "300"]
    mnist = ["--set", "data.dataset=mnist",
             "--set", f"data.train_images={MNIST_DIR / 'images-idx3-ubyte.gz'}",
             "--set", f"data.train_labels={MNIST_DIR / 'labels-idx1-ubyte.gz'}",
             "--set", "data.train_fraction=0.9", "--set", "data.subsample_n=400",
             "--feature-map", "random_mlp", "--set", "features.widths=64,64",
             "--ipc", "2", "--steps", "100", "--seed", "1"]
    same = []
    for name, args in (("blobs", base), ("mnist01", mnist)):
        outs = []
        for k in range(2):
            out = tmp_path / f"{name}{k}"
            assert main(["distill", *args, "--out", str(out)]) == 0
            outs.append(out)
        for f in ("synthetic.dgk", "history.csv"):
            same.append((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes())
    elapsed = time.perf_counter() - t0
    ok = all(same) and elapsed < 120
    report(9, ok, f"repeated CLI distill runs (blobs linear, MNIST random_mlp): "
                  f"{sum(same)}/{len(same)} files byte-identical, {elapsed:.1f}s (<120s)")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
