from . import ops
from .gradcheck import GradCheckResult, check_gradients
from .nn import MLP, Conv2d, Linear, Module
from .tensor import Tape, Tensor, active_tape, as_tensor, default_dtype, precision

__all__ = [
    "ops", "Tensor", "Tape", "active_tape", "as_tensor", "default_dtype", "precision",
    "Module", "Linear", "Conv2d", "MLP", "check_gradients", "GradCheckResult",
]
