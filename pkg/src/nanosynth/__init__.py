"""Mask-to-image synthesis of nanoparticle micrographs with a cycle-consistent, attention-gated GAN."""

from .config import DataConfig, EvalConfig, LossConfig, ModelConfig, RunConfig, TrainingConfig, load_config
from .data import AugmentationPolicy, DatasetSplit, SamplePair, augment, clahe, load_dataset, split_dataset
from .errors import NanosynthError

__version__ = "0.1.0"
