"""Similarity-gated continual-learning optimizer and benchmark harness."""

from .buffer import GradBuffer, memory_mb
from .errors import (BadConfig, BadMagic, DimensionMismatch, DimOverflow,
                     EmptyBuffer, EmptyDataset, IncompleteMatrix,
                     InvalidThresholds, LengthMismatch, NonFiniteLoss,
                     SfaoError, TruncatedFile, ZeroVector)
from .optim import (Decision, GateDecision, OptState, Thresholds, apply_step,
                    gate, ogd_direction, per_layer_step, sfao_direction,
                    sgd_direction)
from .subspace import (OrthoBasis, basis_insert, cosine, interference_risk,
                       project_out, svd_projection_oracle)

__version__ = "0.1.0"
