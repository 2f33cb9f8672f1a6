"""Music- and genre-conditioned dance motion generation by diffusion."""

from .autodiff import Tensor, backward, grad_check
from .diffusion import make_schedule, q_sample, sample_loop
from .motion import MotionSequence, SkeletonDef, default_skeleton, fk

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check",
    "make_schedule", "q_sample", "sample_loop",
    "MotionSequence", "SkeletonDef", "default_skeleton", "fk",
    "__version__",
]
