import logging
from typing import Optional, Tuple

import torch
from torch import Tensor

from contnorm.modules.norms.base import (
    AffineParams,
    NormGrads,
    NormLayer,
    NormLayerSpec,
    standardize,
    standardize_backward,
)
from contnorm.numerics import ShapeError

pylogger = logging.getLogger(__name__)

# moments of the grouped view (B, G, K, H*W)
GROUP_AXES = (2, 3)


def grouped(a: Tensor, groups: int) -> Tensor:
    batch, channels = a.shape[:2]
    if channels % groups != 0:
        message = f"Cannot split <{channels}> channels into <{groups}> groups"
        pylogger.error(message)
        raise ShapeError(message)
    return a.reshape(batch, groups, channels // groups, -1)


def group_standardize(a: Tensor, groups: int, epsilon: float) -> Tuple[Tensor, Tensor]:
    """
    :return the standardized feature map in a's shape and 1/sqrt(var + eps) per (sample, group)
    """
    xhat, _, _, inv_std = standardize(grouped(a, groups), GROUP_AXES, epsilon)
    return xhat.reshape(a.shape), inv_std


def group_standardize_backward(grad_xhat: Tensor, xhat: Tensor, inv_std: Tensor, groups: int) -> Tensor:
    grad_in = standardize_backward(grouped(grad_xhat, groups), grouped(xhat, groups), inv_std, GROUP_AXES)
    return grad_in.reshape(grad_xhat.shape)


class GroupNormalization(NormLayer):
    """Standardizes every (sample, group) slice of K*H*W values; no running statistics, same in train and eval."""

    name = "gn"

    def __init__(
        self, spec: NormLayerSpec, affine: bool = True, dtype: torch.dtype = torch.float32, groups: Optional[int] = None
    ) -> None:
        super().__init__(spec, affine=affine, running=False, dtype=dtype)
        self.groups = spec.groups if groups is None else groups
        if self.groups < 1 or self.channels % self.groups != 0:
            message = f"<{self.kind}> needs C mod G = 0, got C={self.channels}, G={self.groups}"
            pylogger.error(message)
            raise ValueError(message)

    def forward(self, a: Tensor) -> Tensor:
        self.check_input(a)
        xhat, inv_std = group_standardize(a, self.groups, self.epsilon)
        self._store((xhat, inv_std))
        return self.apply_affine(xhat)

    def norm_backward(self, grad_out: Tensor) -> NormGrads:
        xhat, inv_std = self._require_cache()
        grad_xhat, grad_gamma, grad_beta = self.affine_backward(grad_out, xhat)
        grad_in = group_standardize_backward(grad_xhat, xhat, inv_std, self.groups)
        return NormGrads(grad_in, grad_gamma, grad_beta)

    def extra_repr(self) -> str:
        return f"C={self.channels}, G={self.groups}"


class LayerNormalization(GroupNormalization):
    name = "ln"

    def __init__(self, spec: NormLayerSpec, dtype: torch.dtype = torch.float32) -> None:
        super().__init__(spec, dtype=dtype, groups=1)


class InstanceNormalization(GroupNormalization):
    name = "in"

    def __init__(self, spec: NormLayerSpec, dtype: torch.dtype = torch.float32) -> None:
        super().__init__(spec, dtype=dtype, groups=spec.channels)


def gn_forward(a: Tensor, groups: int, params: Optional[AffineParams], epsilon: float) -> Tensor:
    xhat, _ = group_standardize(a, groups, epsilon)
    return xhat if params is None else params.apply(xhat)

