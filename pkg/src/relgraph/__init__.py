"""Latent relational graph learning toolkit.

Pretrains a graph predictor on unlabeled token sequences via context
prediction, then transfers the frozen predictor's affinity graphs to
downstream classifiers through mixtures and gated fusion.
"""

from .autodiff import (
    GradCheckReport,
    ShapeError,
    Tensor,
    UnknownOpError,
    finite_difference_check,
    forward_op,
    reverse_accumulate,
)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeError",
    "UnknownOpError",
    "GradCheckReport",
    "forward_op",
    "reverse_accumulate",
    "finite_difference_check",
    "KERNEL_BACKEND",
    "__version__",
]
