"""Continual learning of algebraic clause chains with transformer classifiers.

Subpackages:
  groups    -- finite group construction and validation (dihedral D3 and friends)
  data      -- experiences, sequence sampling, tokenization, dataset files
  autograd  -- reverse-mode automatic differentiation on numpy arrays
  model     -- post-layer-norm transformer encoder classifiers
  optim     -- Adam and cosine learning-rate schedules
  harness   -- sequential-experience training with replay and checkpoints
  metrics   -- continual-learning metrics and attention analytics
  presets   -- paper-scale and desk-scale experiment presets
  cli       -- experiment driver (generate / train / sweep / analyze / plot)
"""

from .groups import build_dihedral, validate_group, GroupSpec
from .data import (
    make_flipflop_experiences,
    make_compositional_experiences,
    make_full_experience,
    make_incremental_experiences,
    generate_dataset,
)
from .autograd import Tensor, Tape, no_grad
from .model import ModelConfig, init_model, forward, minimal_configs, full_config
from .harness import TrainConfig, train_sequential, evaluate
from .metrics import compute_cl_metrics, CLMetrics

__all__ = [
    "build_dihedral", "validate_group", "GroupSpec",
    "make_flipflop_experiences", "make_compositional_experiences",
    "make_full_experience", "make_incremental_experiences", "generate_dataset",
    "Tensor", "Tape", "no_grad",
    "ModelConfig", "init_model", "forward", "minimal_configs", "full_config",
    "TrainConfig", "train_sequential", "evaluate",
    "compute_cl_metrics", "CLMetrics",
]

__version__ = "0.1.0"
