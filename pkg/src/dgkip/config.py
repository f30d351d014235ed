"""Run configuration: an INI-style file plus command-line overrides.

Grammar (parsed with :mod:`configparser`)::

    # comment
    [section]
    key = value        ; inline comment

Sections and keys (all optional except the data paths):

    [data]      dataset = csv | mnist | fashion_mnist | cifar10
                train, test                      (csv files)
                train_images, train_labels,
                test_images, test_labels         (IDX files, .gz allowed)
                train_batches, test_batches      (CIFAR-10, comma separated)
                classes = 0,1
                subsample_n, train_fraction, split_seed, standardize
    [features]  kind, seed, out_dim, bandwidth, nets, widths, channels, sigma_w
    [model]     loss, lambda_scale, lambda_o, smooth_temperature, max_iters, gap_tol
    [distill]   method (dgkip | kip), ipc, init, steps, learning_rate, beta1, beta2,
                eps, lambda_s, retrain_every, detach_alpha, learn_labels,
                early_stop_window, early_stop_tol
    [run]       seed, out

Relative paths are resolved against the config file's directory. Environment
variables never affect numerics.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_float(v):
    return None if v in (None, "", "none") else float(v)


def _opt_int(v):
    return None if v in (None, "", "none") else int(v)


def _ints(v) -> Tuple[int, ...]:
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(" ", "").split(",") if x)


def _paths(v) -> List[str]:
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [x.strip() for x in str(v).split(",") if x.strip()]


@dataclass
class DataConfig:
    dataset: str = "csv"
    train: Optional[str] = None
    test: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_batches: List[str] = field(default_factory=list)
    test_batches: List[str] = field(default_factory=list)
    classes: Tuple[int, ...] = (0, 1)
    subsample_n: Optional[int] = None
    train_fraction: float = 0.8
    split_seed: int = 0
    standardize: bool = False


@dataclass
class FeatureConfig:
    kind: str = "linear"
    seed: Optional[int] = None  # defaults to run.seed
    out_dim: int = 1024
    bandwidth: float = 1.0
    nets: int = 4
    widths: Tuple[int, ...] = (128, 128, 128)
    channels: int = 32
    sigma_w: float = 1.0


@dataclass
class ModelConfig:
    loss: str = "logistic"
    lambda_scale: float = 1e-6
    lambda_o: Optional[float] = None
    smooth_temperature: float = 1.0
    max_iters: int = 200
    gap_tol: float = 1e-8


@dataclass
class DistillSection:
    method: str = "dgkip"
    ipc: int = 1
    init: str = "real_sample"
    steps: int = 1000
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-16
    lambda_s: Optional[float] = None
    retrain_every: int = 50
    detach_alpha: bool = False
    learn_labels: bool = False
    early_stop_window: int = 50
    early_stop_tol: float = 1e-6


@dataclass
class RunSection:
    seed: int = 0
    out: str = "out"


_CONVERTERS = {
    "classes": _ints, "widths": _ints,
    "train_batches": _paths, "test_batches": _paths,
    "subsample_n": _opt_int, "seed": None,
    "lambda_o": _opt_float, "lambda_s": _opt_float,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillSection = field(default_factory=DistillSection)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ("data", "features", "model", "distill", "run")

    def set(self, section: str, key: str, value) -> None:
        if section not in self.SECTIONS:
            raise KeyError(f"unknown config section [{section}]")
        obj = getattr(self, section)
        types = {f.name: f for f in fields(obj)}
        if key not in types:
            raise KeyError(f"unknown key {key!r} in [{section}]")
        setattr(obj, key, _convert(key, types[key], value))

    def to_dict(self) -> dict:
        d = asdict(self)
        for sec in d.values():
            for k, v in sec.items():
                if isinstance(v, tuple):
                    sec[k] = list(v)
        return d

    @property
    def feature_seed(self) -> int:
        return self.features.seed if self.features.seed is not None else self.run.seed


def _convert(key, f, value):
    if key in _CONVERTERS and _CONVERTERS[key] is not None:
        return _CONVERTERS[key](value)
    if key == "seed" and f.default is None:
        return _opt_int(value)
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if value is None:
        return None
    if t.startswith("Optional[str") or t == "str":
        return str(value)
    if t == "bool":
        return _bool(value)
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    return value


PATH_KEYS = ("train", "test", "train_images", "train_labels", "test_images", "test_labels")


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.read(path)
    base = path.parent
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set(section, key, value)
    d = cfg.data
    for key in PATH_KEYS:
        v = getattr(d, key)
        if v and not Path(v).is_absolute():
            setattr(d, key, str(base / v))
    d.train_batches = [p if Path(p).is_absolute() else str(base / p) for p in d.train_batches]
    d.test_batches = [p if Path(p).is_absolute() else str(base / p) for p in d.test_batches]
    return cfg


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply ``section.key=value``."""
    if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
        raise ValueError(f"override must look like section.key=value, got {assignment!r}")
    lhs, value = assignment.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    cfg.set(section, key.strip(), value.strip())
