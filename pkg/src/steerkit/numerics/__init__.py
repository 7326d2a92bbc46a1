from .checkpoint import CKPT_FORMAT, load_checkpoint, save_checkpoint
from .mlp import MlpParams, mlp_eval, mlp_forward
from .optim import AdamState, NonFiniteGradientError, adam_step
from .rng import Rng
from .tensor import ShapeError, Tape, Tensor, backward, logsumexp


def gaussian(rng: Rng, shape) -> Tensor:
    return Tensor(rng.gaussian(shape))


__all__ = [
    "AdamState",
    "CKPT_FORMAT",
    "MlpParams",
    "NonFiniteGradientError",
    "Rng",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "gaussian",
    "load_checkpoint",
    "logsumexp",
    "mlp_eval",
    "mlp_forward",
    "save_checkpoint",
]
