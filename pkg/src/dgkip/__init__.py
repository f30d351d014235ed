"""Dataset distillation by duality-gap minimization, with certified bounds."""

__version__ = "0.1.0"

from .data import Dataset, SplitSpec, load_synthetic, save_synthetic  # noqa: E402
from .features import FeatureSpec, build_feature_map  # noqa: E402
from .losses import LossFamily  # noqa: E402
from .solver import ModelParams, SolveConfig, duality_gap, train_primal  # noqa: E402
from .distill import DistillConfig, distill  # noqa: E402

__all__ = [
    "Dataset", "SplitSpec", "load_synthetic", "save_synthetic",
    "FeatureSpec", "build_feature_map", "LossFamily",
    "ModelParams", "SolveConfig", "duality_gap", "train_primal",
    "DistillConfig", "distill",
]
