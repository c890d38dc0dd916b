"""Generative adversarial domain adaptation at desk scale.

Trains a (K+1)-class classifier on labeled source plus unlabeled target data,
aligning features with a domain discriminator, pushing target clusters apart
with generated out-of-class samples, and regularizing with virtual adversarial
training and entropy minimization, with optional decision-boundary refinement.
"""

from gada.autodiff import (
    ContractError,
    DimensionError,
    ParamStore,
    Tensor,
    backward,
    grad_check,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "ParamStore",
    "Tensor",
    "backward",
    "grad_check",
]
