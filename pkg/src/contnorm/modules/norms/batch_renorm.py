import logging
from typing import Optional, Tuple

import torch
from torch import Tensor

from contnorm.modules.norms.base import CHANNEL_AXES, NormGrads, NormLayer, NormLayerSpec, as_channel
from contnorm.numerics import reduce_mean_var
from contnorm.utils import Mode

pylogger = logging.getLogger(__name__)


class BatchRenormalization(NormLayer):
    """Batch renormalization with clipped corrections r and d.

    Train mode divides by (sigma_B + eps) rather than sqrt(var_B + eps); eval mode is plain BN eval.
    The corrections are computed from the running statistics before they absorb the current batch and are
    constants for backward.
    """

    name = "brn"

    def __init__(self, spec: NormLayerSpec, dtype: torch.dtype = torch.float32) -> None:
        super().__init__(spec, affine=True, running=True, dtype=dtype)
        self.r_max = spec.brn_rmax
        self.d_max = spec.brn_dmax
        self._last_corrections: Optional[Tuple[Tensor, Tensor]] = None
        self._held_corrections: Optional[Tuple[Tensor, Tensor]] = None

    def corrections(self, mean: Tensor, std: Tensor) -> Tuple[Tensor, Tensor]:
        running_std = torch.sqrt(self.running.var).clamp_min(self.epsilon)
        r = (std / running_std).clamp(1.0 / self.r_max, self.r_max)
        d = ((mean - self.running.mu) / running_std).clamp(-self.d_max, self.d_max)
        return r, d

    def hold_stop_gradient(self, hold: bool) -> None:
        self._held_corrections = self._last_corrections if hold else None

    def forward(self, a: Tensor) -> Tensor:
        self.check_input(a)

        if not self.training:
            self.warn_if_untracked()
            xhat = (a - as_channel(self.running.mu)) * torch.rsqrt(as_channel(self.running.var) + self.epsilon)
            return self.apply_affine(xhat)

        mean, var = reduce_mean_var(a, CHANNEL_AXES)
        std = torch.sqrt(var)

        if self._held_corrections is not None:
            r, d = self._held_corrections
        else:
            r, d = self.corrections(mean, std)
        self._last_corrections = (r, d)

        centered = a - as_channel(mean)
        denominator = as_channel(std + self.epsilon)
        xhat = as_channel(r) * centered / denominator + as_channel(d)

        self.running.update(mean, var)
        self._store((xhat, centered, std, r))

        return self.apply_affine(xhat)

    def norm_backward(self, grad_out: Tensor) -> NormGrads:
        xhat, centered, std, r = self._require_cache()
        grad_xhat, grad_gamma, grad_beta = self.affine_backward(grad_out, xhat)

        n = centered.numel() // self.channels
        denominator = as_channel(std + self.epsilon)
        grad_z = grad_xhat * as_channel(r)

        mean_grad = grad_z.mean(dim=CHANNEL_AXES, keepdim=True)
        # s = 0 implies centered = 0, so the second term vanishes
        safe_std = as_channel(std).clamp_min(torch.finfo(std.dtype).tiny)
        projection = (grad_z * centered).sum(dim=CHANNEL_AXES, keepdim=True)

        grad_in = (grad_z - mean_grad) / denominator - centered * projection / (n * safe_std * denominator**2)
        return NormGrads(grad_in, grad_gamma, grad_beta)

    def bn_stage_input(self, a: Tensor) -> Tensor:
        return a

    def extra_repr(self) -> str:
        return f"C={self.channels}, r_max={self.r_max}, d_max={self.d_max}"


def brn_forward(a: Tensor, layer: BatchRenormalization, r_max: float, d_max: float, mode: Mode) -> Tensor:
    if r_max < 1 or d_max < 0:
        message = f"BRN needs r_max >= 1 and d_max >= 0, got <{r_max}>, <{d_max}>"
        pylogger.error(message)
        raise ValueError(message)

    layer.r_max, layer.d_max = r_max, d_max
    layer.train(Mode(mode) == Mode.TRAIN)
    return layer(a)
