"""Class-level unlearning for small conditional diffusion models, in numpy."""
__version__ = "0.1.0"

from .datasets import Dataset, DatasetSplit, ToyDatasetSpec, generate_dataset, split_forget  # noqa: E402
from .denoiser import DenoiserParams, init_params  # noqa: E402
from .diffusion import CfgConfig, LossWeighting, NoiseSchedule, SamplerConfig, linear_schedule  # noqa: E402
from .evaluation import MetricsReport  # noqa: E402
from .mathcore import Rng  # noqa: E402
from .unlearn import BaselineConfig, UnlearnConfig, erasediff  # noqa: E402

__all__ = [
    "BaselineConfig", "CfgConfig", "Dataset", "DatasetSplit", "DenoiserParams", "LossWeighting",
    "MetricsReport", "NoiseSchedule", "Rng", "SamplerConfig", "ToyDatasetSpec", "UnlearnConfig",
    "erasediff", "generate_dataset", "init_params", "linear_schedule", "split_forget",
]
