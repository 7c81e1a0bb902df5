"""Small deterministic reverse-mode differentiation toolkit."""
from . import tensor as ops
from .gradcheck import directional_check, grad_check, kink_margin
from .optim import ParamStore, adam_step, clip_by_global_norm, load_checkpoint, save_checkpoint
from .posenc import posenc, posenc2d, posenc3d
from .tensor import ShapeError, Tensor, as_tensor, track_kinks

__all__ = [
    "ops", "Tensor", "as_tensor", "ShapeError", "track_kinks",
    "ParamStore", "adam_step", "clip_by_global_norm", "save_checkpoint", "load_checkpoint",
    "grad_check", "directional_check", "kink_margin", "posenc", "posenc2d", "posenc3d",
]
