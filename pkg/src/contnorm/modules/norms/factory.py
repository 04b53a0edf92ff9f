import logging
from typing import Callable, Dict

import torch

from contnorm.modules.norms.base import NormLayer, NormLayerSpec
from contnorm.modules.norms.batch_norm import BatchNormalization
from contnorm.modules.norms.batch_renorm import BatchRenormalization
from contnorm.modules.norms.continual_norm import ContinualNormalization
from contnorm.modules.norms.group_norm import GroupNormalization, InstanceNormalization, LayerNormalization
from contnorm.modules.norms.switch_norm import SwitchNormalization
from contnorm.utils import NormKind

pylogger = logging.getLogger(__name__)

NORM_BUILDERS: Dict[NormKind, Callable[..., NormLayer]] = {
    NormKind.BN: BatchNormalization,
    NormKind.BRN: BatchRenormalization,
    NormKind.GN: GroupNormalization,
    NormKind.LN: LayerNormalization,
    NormKind.IN: InstanceNormalization,
    NormKind.SN: SwitchNormalization,
    NormKind.CN: ContinualNormalization,
    NormKind.CN_VARIANT: ContinualNormalization,
}


def build_norm(spec: NormLayerSpec, dtype: torch.dtype = torch.float32) -> NormLayer:
    """Instantiate the normalization layer described by `spec`, with gamma=1, beta=0 and fresh running stats."""
    return NORM_BUILDERS[spec.kind](spec, dtype=dtype)
