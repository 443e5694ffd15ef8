"""Auxiliary-modality metric learning for visible-infrared retrieval."""

__version__ = "0.1.0"

from .config import TrainConfig, ablation_study_config, load_config, save_config
from .synthdata import Batch, IdentitySpec, Sample, SynthDataset, generate_dataset

__all__ = [
    "Batch",
    "IdentitySpec",
    "Sample",
    "SynthDataset",
    "TrainConfig",
    "ablation_study_config",
    "generate_dataset",
    "load_config",
    "save_config",
    "__version__",
]
