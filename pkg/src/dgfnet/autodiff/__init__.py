from dgfnet.autodiff.tensor import Tensor, apply, backward, no_grad, tensor, is_grad_enabled
from dgfnet.autodiff import ops  # noqa: F401  (registers primitives)
from dgfnet.autodiff.gradcheck import finite_diff_check
from dgfnet.autodiff.optim import Adam, optimizer_step
from dgfnet.autodiff.checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    "Tensor",
    "apply",
    "backward",
    "no_grad",
    "tensor",
    "is_grad_enabled",
    "ops",
    "finite_diff_check",
    "Adam",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
]
