import logging
import math
from typing import Any, Dict, Optional, Tuple

import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.nn.grad import conv2d_input, conv2d_weight

from contnorm.numerics import ShapeError

pylogger = logging.getLogger(__name__)

Shape = Tuple[int, ...]
Gradients = Dict[str, Tensor]


def frozen(tensor: Tensor) -> nn.Parameter:
    """A parameter outside autograd: gradients come from the hand-written backward passes."""
    return nn.Parameter(tensor, requires_grad=False)


class Layer(nn.Module):
    """A differentiable block with a hand-written backward pass.

    In train mode `forward` caches what `backward` needs; eval-mode forwards cache nothing and mutate nothing.
    """

    name: str = "layer"

    def __init__(self) -> None:
        super().__init__()
        self._cache: Optional[Any] = None

    def train(self, mode: bool = True) -> "Layer":
        super().train(mode)
        if not mode:
            self._cache = None
        return self

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, grad_out: Tensor) -> Tuple[Tensor, Gradients]:
        """
        :param grad_out: gradient of the loss w.r.t. the output of the last train-mode forward

        :return gradient w.r.t. the input, gradients w.r.t. the parameters keyed as in `named_parameters()`
        """
        raise NotImplementedError

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def hold_stop_gradient(self, hold: bool) -> None:
        """Freeze the quantities treated as constants by backward to their last train-mode values."""

    @property
    def batch_dependent(self) -> bool:
        return False

    def _require_cache(self) -> Any:
        if self._cache is None:
            raise RuntimeError(f"<{type(self).__name__}> backward called without a cached train-mode forward")
        return self._cache

    def _store(self, cache: Any) -> None:
        self._cache = cache if self.training else None


def _uniform(shape: Shape, fan_in: int, generator: torch.Generator, dtype: torch.dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0).mul_(bound).to(dtype)


class Dense(Layer):
    name = "dense"

    def __init__(
        self, in_features: int, out_features: int, generator: torch.Generator, dtype: torch.dtype = torch.float32
    ) -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = frozen(_uniform((out_features, in_features), in_features, generator, dtype))
        self.bias = frozen(torch.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_features or x.shape[2:] != (1, 1):
            message = f"<{self.name}> expects (B, {self.in_features}, 1, 1), got {tuple(x.shape)}"
            pylogger.error(message)
            raise ShapeError(message)

        flat = x.flatten(1)
        self._store(flat)
        out = flat @ self.weight.T + self.bias
        return out.view(x.shape[0], self.out_features, 1, 1)

    def backward(self, grad_out: Tensor) -> Tuple[Tensor, Gradients]:
        flat = self._require_cache()
        grad_flat = grad_out.flatten(1)

        grads = {"weight": grad_flat.T @ flat, "bias": grad_flat.sum(dim=0)}
        grad_in = (grad_flat @ self.weight).view(flat.shape[0], self.in_features, 1, 1)
        return grad_in, grads

    def output_shape(self, input_shape: Shape) -> Shape:
        if tuple(input_shape) != (self.in_features, 1, 1):
            raise ShapeError(f"<{self.name}> cannot follow a layer producing {tuple(input_shape)}")
        return self.out_features, 1, 1

    def extra_repr(self) -> str:
        return f"{self.in_features}, {self.out_features}"


class Classifier(Dense):
    """The single classification head; the softmax lives in the loss."""

    name = "classifier"


class Conv3x3(Layer):
    name = "conv3x3"

    def __init__(
        self, in_channels: int, out_channels: int, generator: torch.Generator, dtype: torch.dtype = torch.float32
    ) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * 9
        self.weight = frozen(_uniform((out_channels, in_channels, 3, 3), fan_in, generator, dtype))
        self.bias = frozen(torch.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            message = f"<{self.name}> expects {self.in_channels} input channels, got {tuple(x.shape)}"
            pylogger.error(message)
            raise ShapeError(message)

        self._store(x)
        return F.conv2d(x, self.weight, self.bias, padding=1)

    def backward(self, grad_out: Tensor) -> Tuple[Tensor, Gradients]:
        x = self._require_cache()
        grads = {
            "weight": conv2d_weight(x, self.weight.shape, grad_out, padding=1),
            "bias": grad_out.sum(dim=(0, 2, 3)),
        }
        return conv2d_input(x.shape, self.weight, grad_out, padding=1), grads

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape[0] != self.in_channels:
            raise ShapeError(f"<{self.name}> cannot follow a layer producing {tuple(input_shape)}")
        return (self.out_channels,) + tuple(input_shape[1:])

    def extra_repr(self) -> str:
        return f"{self.in_channels}, {self.out_channels}"


class ReLU(Layer):
    name = "relu"

    def forward(self, x: Tensor) -> Tensor:
        mask = x > 0
        self._store(mask)
        return x * mask

    def backward(self, grad_out: Tensor) -> Tuple[Tensor, Gradients]:
        return grad_out * self._require_cache(), {}


class Flatten(Layer):
    name = "flatten"

    def forward(self, x: Tensor) -> Tensor:
        self._store(x.shape)
        return x.reshape(x.shape[0], -1, 1, 1)

    def backward(self, grad_out: Tensor) -> Tuple[Tensor, Gradients]:
        return grad_out.reshape(self._require_cache()), {}

    def output_shape(self, input_shape: Shape) -> Shape:
        return math.prod(input_shape), 1, 1


class GlobalAvgPool(Layer):
    name = "avgpool"

    def forward(self, x: Tensor) -> Tensor:
        self._store(x.shape)
        return x.mean(dim=(2, 3), keepdim=True)

    def backward(self, grad_out: Tensor) -> Tuple[Tensor, Gradients]:
        shape = self._require_cache()
        return grad_out.expand(shape) / (shape[2] * shape[3]), {}

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape[0], 1, 1
