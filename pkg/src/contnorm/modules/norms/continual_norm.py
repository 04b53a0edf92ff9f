import logging
from typing import List, Optional

import torch
from torch import Tensor

from contnorm.modules.norms.base import CHANNEL_AXES, NormGrads, NormLayer, NormLayerSpec, RunningStats, as_channel
from contnorm.modules.norms.batch_norm import BatchNormalization
from contnorm.modules.norms.group_norm import GroupNormalization, gn_forward
from contnorm.utils import Mode, NormKind, VariantOrder

pylogger = logging.getLogger(__name__)


class ContinualNormalization(NormLayer):
    """Group normalization without affine followed by batch normalization carrying the single (gamma, beta) pair.

    The batch stage keeps the running statistics, estimated on the group-normalized features. The variants swap
    the order of the two stages and/or apply the same affine pair after both stages (tied); the default is
    GN then BN, untied.
    """

    name = "cn"

    def __init__(self, spec: NormLayerSpec, dtype: torch.dtype = torch.float32) -> None:
        super().__init__(spec, affine=True, running=False, dtype=dtype)
        self.groups = spec.groups
        self.order = spec.variant_order if spec.kind == NormKind.CN_VARIANT else VariantOrder.GN_THEN_BN
        self.tied = spec.tied_affine if spec.kind == NormKind.CN_VARIANT else False

        self.gn_stage = GroupNormalization(spec, affine=False, dtype=dtype)
        self.bn_stage = BatchNormalization(spec, affine=False, dtype=dtype)

    @property
    def stages(self) -> List[NormLayer]:
        if self.order == VariantOrder.GN_THEN_BN:
            return [self.gn_stage, self.bn_stage]
        return [self.bn_stage, self.gn_stage]

    @property
    def running(self) -> Optional[RunningStats]:
        return self.bn_stage.running

    def forward(self, a: Tensor) -> Tensor:
        self.check_input(a)
        first, second = self.stages

        first_out = first(a)
        hidden = self.apply_affine(first_out) if self.tied else first_out
        second_out = second(hidden)

        self._store((first_out, second_out))
        return self.apply_affine(second_out)

    def norm_backward(self, grad_out: Tensor) -> NormGrads:
        first_out, second_out = self._require_cache()
        first, second = self.stages

        grad_hidden, grad_gamma, grad_beta = self.affine_backward(grad_out, second_out)
        grad_hidden, _ = second.backward(grad_hidden)

        if self.tied:
            grad_gamma = grad_gamma + (grad_hidden * first_out).sum(dim=CHANNEL_AXES)
            grad_beta = grad_beta + grad_hidden.sum(dim=CHANNEL_AXES)
            grad_hidden = grad_hidden * as_channel(self.affine.gamma)

        grad_in, _ = first.backward(grad_hidden)
        return NormGrads(grad_in, grad_gamma, grad_beta)

    def bn_stage_input(self, a: Tensor) -> Tensor:
        if self.order == VariantOrder.BN_THEN_GN:
            return a
        group_normalized = gn_forward(a, self.groups, None, self.epsilon)
        return self.apply_affine(group_normalized) if self.tied else group_normalized

    def extra_repr(self) -> str:
        tied = ", tied" if self.tied else ""
        return f"C={self.channels}, G={self.groups}, {self.order}{tied}"


def cn_forward(a: Tensor, groups: int, layer: ContinualNormalization, mode: Mode) -> Tensor:
    if groups != layer.groups:
        message = f"Layer was built with <{layer.groups}> groups, asked to run with <{groups}>"
        pylogger.error(message)
        raise ValueError(message)
    layer.train(Mode(mode) == Mode.TRAIN)
    return layer(a)


def cn_variant_forward(a: Tensor, layer: ContinualNormalization, mode: Mode) -> Tensor:
    layer.train(Mode(mode) == Mode.TRAIN)
    return layer(a)
