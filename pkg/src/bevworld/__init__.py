"""bevworld: a variational world model over a synthetic bird's-eye-view
driving world, with a self-contained differentiable-array engine, occupancy
and action decoders, a pretrain/finetune pipeline, and format-stable episode
and checkpoint files."""

from .autodiff import Value, apply_primitive, backward, finite_diff_check
from .kernels import BACKEND as KERNEL_BACKEND
from .rng import RngState, sample_normal

__all__ = [
    "Value",
    "apply_primitive",
    "backward",
    "finite_diff_check",
    "RngState",
    "sample_normal",
    "KERNEL_BACKEND",
]
