"""Deep metric learning with a class-specific and a shared embedding head.

The package trains a small feature extractor with two L2-normalized heads on
synthetic latent-factor data: ``phi`` is trained on class triplets, ``phi_star``
on triplets whose members all come from different classes, and an optional
adversarial regressor decorrelates the two heads.
"""

from .dataset import Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset, split_by_class
from .experiment import ExperimentConfig, load_config, run_ablation, run_training
from .losses import LossConfig
from .model import ModelDims, ModelParams, init_params
from .sampling import SamplerConfig

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ExperimentConfig",
    "LossConfig",
    "ModelDims",
    "ModelParams",
    "SamplerConfig",
    "SynthConfig",
    "generate_synthetic",
    "init_params",
    "load_config",
    "load_dataset",
    "run_ablation",
    "run_training",
    "save_dataset",
    "split_by_class",
]
