"""Contrastive attraction and contrastive repulsion (CACR) on toy data.

Loss functionals with analytic gradients, a small MLP encoder, synthetic
labeled data, SGD and momentum-queue trainers, frozen-feature probes and a
config-driven command-line runner.
"""

from .encoder import MlpParams, MlpSpec, init_params, load_checkpoint, mlp_backward, mlp_forward, save_checkpoint
from .errors import (CacrError, ChecksumMismatch, CollapseDetected, ConfigError, DatasetTooSmall, DimMismatch,
                     EmptyNegativeSupport, EmptyValidation, KMismatch, LabelMismatch, NonFiniteLoss,
                     ShapeMismatch, ZeroNorm)
from .losses import (LOSS_NAMES, NEG_INNER_PRODUCT, SQUARED_EUCLIDEAN, ContrastiveBatch, CostKind, GradFlow,
                     LossEval, LossSpec, Temperatures, WeightPolarity, cacr_loss, conditional_entropy,
                     mutual_information)
from .rng import make_rng

__version__ = "0.1.0"
