import logging
from dataclasses import dataclass
from typing import Mapping

import torch
from torch import Tensor

from contnorm.modules.stack import LayerStack
from contnorm.numerics import ShapeError

pylogger = logging.getLogger(__name__)


@dataclass
class SgdConfig:
    learning_rate: float = 0.03
    batch_size: int = 10

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            message = f"Learning rate must be positive, got <{self.learning_rate}>"
            pylogger.error(message)
            raise ValueError(message)
        if self.batch_size < 1:
            message = f"Batch size must be positive, got <{self.batch_size}>"
            pylogger.error(message)
            raise ValueError(message)


@torch.no_grad()
def sgd_step(stack: LayerStack, grads: Mapping[str, Tensor], config: SgdConfig) -> LayerStack:
    """theta <- theta - lr * grad, in place, for every parameter with a gradient. Running statistics are buffers
    and never reach the optimizer."""
    params = dict(stack.named_parameters())

    unknown = set(grads) - set(params)
    if unknown:
        message = f"Gradients for unknown parameters: <{sorted(unknown)}>"
        pylogger.error(message)
        raise KeyError(message)

    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            message = f"Gradient of <{name}> has shape {tuple(grad.shape)}, parameter has {tuple(param.shape)}"
            pylogger.error(message)
            raise ShapeError(message)
        param.sub_(grad.to(param.dtype), alpha=config.learning_rate)

    return stack


def accumulate(total: Mapping[str, Tensor], grads: Mapping[str, Tensor], scale: float = 1.0) -> dict:
    """Sum of two gradient dicts, the second one scaled."""
    merged = dict(total)
    for name, grad in grads.items():
        merged[name] = merged[name] + scale * grad if name in merged else scale * grad
    return merged
