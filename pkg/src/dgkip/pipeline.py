"""End-to-end stages: train theta_O, distill, certify, evaluate, transfer.

Every stage writes its artifacts into ``cfg.run.out`` together with a
``run.json`` manifest (config echo, seeds, library versions, file digests).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .bounds import test_error_bounds, write_bounds_csv
from .config import RunConfig
from .data import (
    Dataset, SplitSpec, binarize, load_cifar10, load_csv, load_idx, load_synthetic,
    save_synthetic, split, standardize, subsample,
)
from .distill import DistillConfig, distill, gap_objective, write_history_csv
from .features import FeatureSpec, build_feature_map
from .kip import kip_distill
from .losses import LossFamily
from .solver import (
    SolveConfig, accuracy, default_lambda, duality_gap, gap_radius, load_model, save_model, train_primal,
)

log = logging.getLogger(__name__)

MODEL_FILE = "model.dgkm"
SYNTH_FILE = "synthetic.dgk"
HISTORY_FILE = "history.csv"
SUMMARY_FILE = "summary.txt"
BOUNDS_FILE = "bounds.csv"
EVAL_FILE = "eval.csv"
TRANSFER_FILE = "transfer.csv"
MANIFEST_FILE = "run.json"


class ConfigError(ValueError):
    """The run configuration is incomplete or inconsistent."""


@dataclass
class StageResult:
    converged: bool
    summary: str
    outputs: List[Path] = field(default_factory=list)
    values: Dict[str, object] = field(default_factory=dict)


def _g(x) -> str:
    return "nan" if x is None else f"{x:.4g}"


def _require(path, what):
    if not path:
        raise ConfigError(f"missing config value: {what}")
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


# -- data ---------------------------------------------------------------------


def _load_raw(cfg: RunConfig, part: str) -> Optional[Dataset]:
    d = cfg.data
    kind = d.dataset
    if kind == "csv":
        path = getattr(d, part)
        if path is None and part == "test":
            return None
        return load_csv(_require(path, f"data.{part}"))
    if kind in ("mnist", "fashion_mnist"):
        img, lab = getattr(d, f"{part}_images"), getattr(d, f"{part}_labels")
        if img is None and lab is None and part == "test":
            return None
        return load_idx(_require(img, f"data.{part}_images"), _require(lab, f"data.{part}_labels"))
    if kind == "cifar10":
        batches = getattr(d, f"{part}_batches")
        if not batches and part == "test":
            return None
        if not batches:
            raise ConfigError(f"missing config value: data.{part}_batches")
        return load_cifar10([_require(p, f"data.{part}_batches") for p in batches])
    raise ConfigError(f"unknown dataset {kind!r}")


def load_data(cfg: RunConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """Binary (train, test) sets; without a test file the train pool is split."""
    d = cfg.data
    if len(d.classes) != 2:
        raise ConfigError("data.classes must name exactly two classes")
    a, b = d.classes
    train_raw = _load_raw(cfg, "train")
    test_raw = _load_raw(cfg, "test")
    train = binarize(train_raw, a, b)
    test = binarize(test_raw, a, b) if test_raw is not None else None
    if test is None and d.train_fraction < 1.0:
        train, test = split(train, SplitSpec(d.train_fraction, None, d.split_seed))
    if d.subsample_n is not None:
        train = subsample(train, d.subsample_n, d.split_seed)
    if d.standardize:
        if test is not None:
            train, test = standardize(train, test)
        else:
            train = standardize(train)
    return train, test


def feature_spec_for(cfg: RunConfig, ds: Dataset) -> FeatureSpec:
    f = cfg.features
    image_shape = ds.image_shape if f.kind == "random_conv" else None
    if f.kind == "random_conv" and image_shape is None:
        raise ConfigError("random_conv needs image data (IDX or CIFAR-10 input)")
    return FeatureSpec(
        kind=f.kind, input_dim=ds.dim, seed=cfg.feature_seed, out_dim=f.out_dim,
        bandwidth=f.bandwidth, nets=f.nets, widths=f.widths, channels=f.channels,
        sigma_w=f.sigma_w, image_shape=image_shape,
    )


def loss_family(cfg: RunConfig, kind: Optional[str] = None) -> LossFamily:
    return LossFamily(kind or cfg.model.loss, cfg.model.smooth_temperature)


def solve_config(cfg: RunConfig) -> SolveConfig:
    return SolveConfig(max_iters=cfg.model.max_iters, gap_tol_per_sample=cfg.model.gap_tol)


def distill_config(cfg: RunConfig) -> DistillConfig:
    s = cfg.distill
    return DistillConfig(
        ipc=s.ipc, init_strategy=s.init, steps=s.steps, learning_rate=s.learning_rate,
        beta1=s.beta1, beta2=s.beta2, eps=s.eps, lambda_scale=cfg.model.lambda_scale,
        lam=s.lambda_s, retrain_every=s.retrain_every, seed=cfg.run.seed,
        learn_labels=s.learn_labels, detach_alpha=s.detach_alpha,
        early_stop_window=s.early_stop_window, early_stop_tol=s.early_stop_tol,
    )


def lambda_s(cfg: RunConfig, n_s: int) -> float:
    return cfg.distill.lambda_s if cfg.distill.lambda_s is not None else default_lambda(n_s, cfg.model.lambda_scale)


def train_original(cfg: RunConfig, train: Dataset, fmap, fam: LossFamily):
    lam = cfg.model.lambda_o if cfg.model.lambda_o is not None else default_lambda(train.n, cfg.model.lambda_scale)
    Phi = fmap.featurize_batch(train.inputs)
    model = train_primal(fam, Phi, train.labels, lam, solve_config(cfg))
    model.feature_spec = fmap.spec.to_dict()
    return model


def _test_accuracy(theta, fmap, test: Optional[Dataset]):
    if test is None:
        return None
    return accuracy(theta, fmap.featurize_batch(test.inputs), test.labels)


def _retrain_on(S: Dataset, fam: LossFamily, lam: float, fmap, cfg: RunConfig):
    return train_primal(fam, fmap.featurize_batch(S.inputs), S.labels, lam, solve_config(cfg))


# -- manifest -----------------------------------------------------------------


def _versions() -> dict:
    import numba
    import scipy

    return {
        "dgkip": __version__, "python": platform.python_version(),
        "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
    }


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: RunConfig, command: str, result: StageResult, extra: Optional[dict] = None) -> Path:
    out = Path(cfg.run.out)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seeds": {"run": cfg.run.seed, "features": cfg.feature_seed, "split": cfg.data.split_seed},
        "versions": _versions(),
        "converged": result.converged,
        "outputs": {p.name: _digest(p) for p in result.outputs},
        "values": result.values,
    }
    if extra:
        manifest.update(extra)
    path = out / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _finish(cfg: RunConfig, command: str, result: StageResult) -> StageResult:
    out = Path(cfg.run.out)
    (out / SUMMARY_FILE).write_text(result.summary + "\n")
    result.outputs.append(out / SUMMARY_FILE)
    write_manifest(cfg, command, result)
    return result


# -- stages -------------------------------------------------------------------


def run_distill(cfg: RunConfig, method: Optional[str] = None) -> StageResult:
    """Train theta_O, distill S, write checkpoint/synthetic/history/summary."""
    method = method or cfg.distill.method
    if method not in ("dgkip", "kip"):
        raise ConfigError(f"unknown distillation method {method!r}")
    train, test = load_data(cfg)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    fmap = build_feature_map(feature_spec_for(cfg, train))
    fam = loss_family(cfg)

    model_o = train_original(cfg, train, fmap, fam)
    log.info("theta_O: lambda=%.3g gap=%.3e converged=%s", model_o.lam, model_o.gap, model_o.converged)
    save_model(out / MODEL_FILE, model_o)

    dcfg = distill_config(cfg)
    if method == "dgkip":
        S, history = distill(train, model_o.theta, dcfg, fmap, fam, test=test)
    else:
        S, history = kip_distill(train, dcfg, fmap, test=test)
    save_synthetic(S, out / SYNTH_FILE)
    write_history_csv(history, out / HISTORY_FILE)

    lam_s = lambda_s(cfg, S.n)
    gap, _ = gap_objective(S.inputs, S.labels, model_o.theta, lam_s, fam, fmap)
    radius = gap_radius(gap, lam_s)
    model_s = _retrain_on(S, fam, lam_s, fmap, cfg)
    acc_o = _test_accuracy(model_o.theta, fmap, test)
    acc_s = _test_accuracy(model_s.theta, fmap, test)
    theta_norm = float(np.linalg.norm(model_o.theta)) or 1.0
    values = {
        "method": method, "n_original": train.n, "n_synthetic": S.n,
        "lambda_o": model_o.lam, "lambda_s": lam_s, "gap": gap, "radius": radius,
        "radius_over_theta_norm": radius / theta_norm,
        "deviation_over_theta_norm": float(np.linalg.norm(model_o.theta - model_s.theta)) / theta_norm,
        "test_accuracy_original": acc_o, "test_accuracy_synthetic": acc_s,
        "steps_run": len(history), "stopped_early": history.stopped_early,
    }
    converged = bool(model_o.converged and model_s.converged)
    summary = (
        f"{method} {fam.kind}: n_S={S.n} gap={_g(gap)} radius={_g(radius)} "
        f"radius/|theta_O|={_g(radius / theta_norm)} acc(theta_O)={_g(acc_o)} acc(theta_S)={_g(acc_s)}"
        + ("" if converged else " [not converged]")
    )
    result = StageResult(converged, summary, [out / MODEL_FILE, out / SYNTH_FILE, out / HISTORY_FILE], values)
    return _finish(cfg, "distill" if method == "dgkip" else "kip", result)


def _default_path(cfg: RunConfig, given, name):
    return Path(given) if given else Path(cfg.run.out) / name


def _model_and_map(cfg: RunConfig, checkpoint: Path, like: Dataset):
    model = load_model(checkpoint)
    spec = FeatureSpec.from_dict(model.feature_spec) if model.feature_spec else feature_spec_for(cfg, like)
    return model, build_feature_map(spec)


def run_certify(cfg: RunConfig, checkpoint=None, synthetic=None) -> StageResult:
    """Gap of theta_O on S and the resulting test-error sandwich."""
    checkpoint = _default_path(cfg, checkpoint, MODEL_FILE)
    synthetic = _default_path(cfg, synthetic, SYNTH_FILE)
    _require(str(checkpoint), "checkpoint")
    _require(str(synthetic), "synthetic")
    train, test = load_data(cfg)
    if test is None:
        raise ConfigError("certify needs a test set (data.test or data.train_fraction < 1)")
    model, fmap = _model_and_map(cfg, checkpoint, train)
    S = load_synthetic(synthetic)
    lam = lambda_s(cfg, S.n)
    rep_gap = duality_gap(model.loss, model.theta, fmap.featurize_batch(S.inputs), S.labels, lam)
    report = test_error_bounds(test, model.theta, rep_gap.gap, lam, fmap)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bounds_csv(report, out / BOUNDS_FILE)
    summary = (
        f"certify {model.loss.kind}: n_test={report.n_test} cor={report.n_cor} mis={report.n_mis} "
        f"unk={report.n_unk} test error in [{_g(report.lower)}, {_g(report.upper)}] "
        f"gap={_g(report.gap)} radius={_g(report.radius)}"
    )
    values = {k: getattr(report, k) for k in ("n_test", "n_cor", "n_mis", "n_unk", "lower", "upper", "gap", "radius")}
    return _finish(cfg, "certify", StageResult(True, summary, [out / BOUNDS_FILE], values))


def _write_rows(path: Path, header, rows) -> None:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.17g}"
        return "" if v is None else v

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def run_eval(cfg: RunConfig, synthetic=None, checkpoint=None) -> StageResult:
    """Retrain the configured loss family on S and report test accuracy."""
    synthetic = _default_path(cfg, synthetic, SYNTH_FILE)
    _require(str(synthetic), "synthetic")
    train, test = load_data(cfg)
    if test is None:
        raise ConfigError("eval needs a test set (data.test or data.train_fraction < 1)")
    ckpt = _default_path(cfg, checkpoint, MODEL_FILE)
    if checkpoint is not None:
        _require(str(ckpt), "checkpoint")
    model_o, fmap = (_model_and_map(cfg, ckpt, train) if ckpt.exists()
                     else (None, build_feature_map(feature_spec_for(cfg, train))))
    S = load_synthetic(synthetic)
    fam = loss_family(cfg)
    lam = lambda_s(cfg, S.n)
    model = _retrain_on(S, fam, lam, fmap, cfg)
    acc = _test_accuracy(model.theta, fmap, test)
    rows = [("synthetic", fam.kind, S.n, lam, acc, model.gap, model.converged)]
    acc_o = None
    if model_o is not None:
        acc_o = _test_accuracy(model_o.theta, fmap, test)
        rows.append(("original", model_o.loss.kind, train.n, model_o.lam, acc_o, model_o.gap, model_o.converged))
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / EVAL_FILE, ("model", "loss", "n_train", "lambda", "test_accuracy", "train_gap", "converged"), rows)
    summary = f"eval {fam.kind}: acc(theta_S)={_g(acc)}" + ("" if acc_o is None else f" acc(theta_O)={_g(acc_o)}")
    values = {"test_accuracy_synthetic": acc, "test_accuracy_original": acc_o}
    return _finish(cfg, "eval", StageResult(model.converged, summary, [out / EVAL_FILE], values))


def transfer_accuracies(S: Dataset, test: Dataset, fmap, source: LossFamily, lam: float,
                        config: Optional[SolveConfig] = None) -> Dict[str, float]:
    """Test accuracy of both loss families retrained on S."""
    Phi_s = fmap.featurize_batch(S.inputs)
    Phi_t = fmap.featurize_batch(test.inputs)
    accs, conv = {}, True
    for fam in (source, source.other()):
        m = train_primal(fam, Phi_s, S.labels, lam, config)
        accs[fam.kind] = accuracy(m.theta, Phi_t, test.labels)
        conv = conv and m.converged
    return {"same": accs[source.kind], "cross": accs[source.other().kind], "converged": conv}


def run_transfer(cfg: RunConfig, synthetic=None, checkpoint=None) -> StageResult:
    """Retrain the other loss family on S and compare with the same family."""
    synthetic = _default_path(cfg, synthetic, SYNTH_FILE)
    _require(str(synthetic), "synthetic")
    train, test = load_data(cfg)
    if test is None:
        raise ConfigError("transfer needs a test set (data.test or data.train_fraction < 1)")
    ckpt = _default_path(cfg, checkpoint, MODEL_FILE)
    if checkpoint is not None:
        _require(str(ckpt), "checkpoint")
    if ckpt.exists():
        model_o, fmap = _model_and_map(cfg, ckpt, train)
        source = model_o.loss
    else:
        fmap = build_feature_map(feature_spec_for(cfg, train))
        source = loss_family(cfg)
    S = load_synthetic(synthetic)
    lam = lambda_s(cfg, S.n)
    r = transfer_accuracies(S, test, fmap, source, lam, solve_config(cfg))
    other = source.other().kind
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / TRANSFER_FILE, ("source_loss", "eval_loss", "test_accuracy"),
                [(source.kind, source.kind, r["same"]), (source.kind, other, r["cross"])])
    summary = (f"transfer {source.kind} -> {other}: acc={_g(r['cross'])} "
               f"(same family {_g(r['same'])}, diff {_g(100 * (r['cross'] - r['same']))} pts)")
    values = {"source": source.kind, "same_family_accuracy": r["same"], "cross_family_accuracy": r["cross"]}
    return _finish(cfg, "transfer", StageResult(bool(r["converged"]), summary, [out / TRANSFER_FILE], values))
