import logging

import torch
from torch import Tensor

from contnorm.modules.norms.base import (
    CHANNEL_AXES,
    NormGrads,
    NormLayer,
    NormLayerSpec,
    as_channel,
    standardize,
    standardize_backward,
)
from contnorm.utils import Mode

pylogger = logging.getLogger(__name__)


class BatchNormalization(NormLayer):
    """Per-channel standardization over (B, H, W).

    Train mode uses the batch moments and folds them into the running statistics; eval mode uses the running
    statistics only, so every sample is normalized independently of its batch.
    """

    name = "bn"

    def __init__(self, spec: NormLayerSpec, affine: bool = True, dtype: torch.dtype = torch.float32) -> None:
        super().__init__(spec, affine=affine, running=True, dtype=dtype)

    def forward(self, a: Tensor) -> Tensor:
        self.check_input(a)

        if self.training:
            xhat, mean, var, inv_std = standardize(a, CHANNEL_AXES, self.epsilon)
            self.running.update(mean.view(-1), var.view(-1))
            self._store((xhat, inv_std))
        else:
            self.warn_if_untracked()
            xhat = (a - as_channel(self.running.mu)) * torch.rsqrt(as_channel(self.running.var) + self.epsilon)

        return self.apply_affine(xhat)

    def norm_backward(self, grad_out: Tensor) -> NormGrads:
        xhat, inv_std = self._require_cache()
        grad_xhat, grad_gamma, grad_beta = self.affine_backward(grad_out, xhat)
        grad_in = standardize_backward(grad_xhat, xhat, inv_std, CHANNEL_AXES)
        return NormGrads(grad_in, grad_gamma, grad_beta)

    def bn_stage_input(self, a: Tensor) -> Tensor:
        return a


def bn_forward(a: Tensor, layer: BatchNormalization, mode: Mode) -> Tensor:
    layer.train(Mode(mode) == Mode.TRAIN)
    return layer(a)
