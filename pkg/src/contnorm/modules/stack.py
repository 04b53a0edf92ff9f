import copy
import logging
import math
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from contnorm.modules.layers import Classifier, Conv3x3, Dense, Flatten, GlobalAvgPool, Layer, ReLU, Shape
from contnorm.modules.norms.base import NormLayer, NormLayerSpec
from contnorm.modules.norms.factory import build_norm
from contnorm.numerics import ShapeError
from contnorm.utils import Backbone

pylogger = logging.getLogger(__name__)

StateDict = Dict[str, Tensor]


class LayerStack(nn.Module):
    """An ordered list of layers ending with the single classification head.

    Parameters and running statistics follow the module naming, e.g. `layers.2.gamma` and
    `layers.2.running_stats.mu`; `layer_names` labels layers by position and kind, e.g. `2.bn`.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Shape) -> None:
        super().__init__()
        self.layers = nn.ModuleList(layers)
        self.input_shape: Shape = tuple(input_shape)
        self._validate()

    def _validate(self) -> None:
        heads = [i for i, layer in enumerate(self.layers) if isinstance(layer, Classifier)]
        if len(heads) != 1 or heads[0] != len(self.layers) - 1:
            message = f"A stack needs exactly one classifier head as its last layer, found heads at {heads}"
            pylogger.error(message)
            raise ShapeError(message)

        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as e:
                pylogger.error(f"Layer <{index}.{layer.name}> does not compose: {e}")
                raise

        self.num_classes = shape[0]

    @property
    def layer_names(self) -> List[str]:
        return [f"{index}.{layer.name}" for index, layer in enumerate(self.layers)]

    @staticmethod
    def parameter_prefix(index: int) -> str:
        return f"layers.{index}"

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def check_input(self, x: Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.input_shape:
            message = f"Stack expects inputs of shape (B, {', '.join(map(str, self.input_shape))}), got {tuple(x.shape)}"
            pylogger.error(message)
            raise ShapeError(message)

    def forward(self, x: Tensor) -> Tensor:
        """
        :param x: (B, C, H, W) batch

        :return logits of shape (B, Y)
        """
        self.check_input(x)
        for layer in self.layers:
            x = layer(x)
        return x.reshape(x.shape[0], self.num_classes)

    def forward_until(self, x: Tensor, index: int) -> Tensor:
        """Input of layer `index` for the batch x, under the current mode."""
        self.check_input(x)
        for layer in self.layers[:index]:
            x = layer(x)
        return x

    def backward(self, grad_logits: Tensor) -> Tuple[Tensor, StateDict]:
        """
        :param grad_logits: gradient of the loss w.r.t. the logits of the last train-mode forward

        :return gradient w.r.t. the input batch, gradients keyed as in `named_parameters`
        """
        grad = grad_logits.reshape(grad_logits.shape[0], self.num_classes, 1, 1)
        grads: StateDict = {}
        for index in reversed(range(len(self.layers))):
            grad, layer_grads = self.layers[index].backward(grad)
            for key, value in layer_grads.items():
                grads[f"{self.parameter_prefix(index)}.{key}"] = value
        return grad, grads

    def snapshot(self) -> StateDict:
        """Detached copy of the state dict, unaffected by later updates."""
        return copy.deepcopy(self.state_dict())

    def clone(self) -> "LayerStack":
        return copy.deepcopy(self)

    def norm_layers(self, batch_dependent_only: bool = True) -> List[Tuple[int, NormLayer]]:
        return [
            (index, layer)
            for index, layer in enumerate(self.layers)
            if isinstance(layer, NormLayer) and (layer.batch_dependent or not batch_dependent_only)
        ]

    def hold_stop_gradient(self, hold: bool) -> None:
        for layer in self.layers:
            layer.hold_stop_gradient(hold)


def build_backbone(
    backbone: Backbone,
    input_shape: Shape,
    num_classes: int,
    norm: Optional[Mapping[str, Any]],
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
    hidden_dim: int = 100,
    channels: int = 8,
) -> LayerStack:
    """Build one of the two backbones, with a normalization layer after every hidden dense/conv layer.

    mlp_toy: Flatten, [Dense, Norm, ReLU] x 2, Classifier.
    cnn_small: [Conv3x3, Norm, ReLU] x 2, GlobalAvgPool, Flatten, Classifier.

    :param norm: NormLayerSpec fields except `channels`; None (or kind "none") builds the stack without norms
    :param generator: seeds the weight initialization
    """
    norm_fields = None if norm is None or norm.get("kind") in (None, "none") else dict(norm)

    def norm_block(width: int) -> List[Layer]:
        if norm_fields is None:
            return []
        return [build_norm(NormLayerSpec(channels=width, **norm_fields), dtype=dtype)]

    backbone = Backbone(backbone)
    layers: List[Layer] = []

    if backbone == Backbone.MLP_TOY:
        in_features = math.prod(input_shape)
        layers.append(Flatten())
        for width_in, width_out in ((in_features, hidden_dim), (hidden_dim, hidden_dim)):
            layers += [Dense(width_in, width_out, generator, dtype), *norm_block(width_out), ReLU()]
        layers.append(Classifier(hidden_dim, num_classes, generator, dtype))
    else:
        for width_in, width_out in ((input_shape[0], channels), (channels, channels)):
            layers += [Conv3x3(width_in, width_out, generator, dtype), *norm_block(width_out), ReLU()]
        layers += [GlobalAvgPool(), Flatten(), Classifier(channels, num_classes, generator, dtype)]

    stack = LayerStack(layers, input_shape)
    pylogger.debug(f"Built <{backbone}> stack {stack}")
    return stack
