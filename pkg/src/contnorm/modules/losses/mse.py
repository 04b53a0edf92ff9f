from typing import Tuple

from torch import Tensor

from contnorm.modules.losses.utils import flat_logits


def mse_loss(prediction: Tensor, target: Tensor) -> Tuple[float, Tensor]:
    """Mean over every element of (prediction - target)^2, and its gradient w.r.t. prediction."""
    diff = flat_logits(prediction) - flat_logits(target).to(prediction.dtype)
    loss = diff.pow(2).mean()
    grad = 2.0 * diff / diff.numel()
    return float(loss), grad.reshape(prediction.shape)
