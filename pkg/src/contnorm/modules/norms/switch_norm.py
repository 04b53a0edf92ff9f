import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
from torch import Tensor

from contnorm.modules.layers import frozen
from contnorm.modules.norms.base import CHANNEL_AXES, NormGrads, NormLayer, NormLayerSpec, as_channel
from contnorm.numerics import reduce_mean_var, reduced_count
from contnorm.utils import Mode

pylogger = logging.getLogger(__name__)

# blended constituents, in logit order
CONSTITUENTS: Tuple[str, ...] = ("bn", "ln", "in")
CONSTITUENT_AXES: Dict[str, Tuple[int, ...]] = {"bn": CHANNEL_AXES, "ln": (1, 2, 3), "in": (2, 3)}


@dataclass
class SnBlendWeights:
    """Two 3-way logit vectors, one for the means and one for the variances, ordered as BN, LN, IN."""

    mean_logits: Tensor
    var_logits: Tensor

    @classmethod
    def uniform(cls, dtype: torch.dtype = torch.float32) -> "SnBlendWeights":
        return cls(mean_logits=torch.zeros(3, dtype=dtype), var_logits=torch.zeros(3, dtype=dtype))

    @classmethod
    def one_hot(cls, constituent: str, dtype: torch.dtype = torch.float64, scale: float = 1e3) -> "SnBlendWeights":
        logits = torch.zeros(3, dtype=dtype)
        logits[CONSTITUENTS.index(constituent)] = scale
        return cls(mean_logits=logits.clone(), var_logits=logits.clone())

    @property
    def mean_weights(self) -> Tensor:
        return torch.softmax(self.mean_logits, dim=0)

    @property
    def var_weights(self) -> Tensor:
        return torch.softmax(self.var_logits, dim=0)


def softmax_backward(grad_weights: Tensor, weights: Tensor) -> Tensor:
    return weights * (grad_weights - (grad_weights * weights).sum())


class SwitchNormalization(NormLayer):
    """Normalizes with convex blends of the BN, LN and IN moments.

    The BN constituent uses batch moments in train mode and the running statistics in eval mode; the running
    statistics are estimated from the raw input.
    """

    name = "sn"

    def __init__(self, spec: NormLayerSpec, dtype: torch.dtype = torch.float32) -> None:
        super().__init__(spec, affine=True, running=True, dtype=dtype)
        uniform = SnBlendWeights.uniform(dtype)
        self.mean_logits, self.var_logits = frozen(uniform.mean_logits), frozen(uniform.var_logits)

    @property
    def blend(self) -> SnBlendWeights:
        return SnBlendWeights(mean_logits=self.mean_logits, var_logits=self.var_logits)

    @blend.setter
    def blend(self, blend: SnBlendWeights) -> None:
        self.mean_logits.copy_(blend.mean_logits)
        self.var_logits.copy_(blend.var_logits)

    def constituent_moments(self, a: Tensor) -> List[Tuple[Tensor, Tensor]]:
        moments = []
        for constituent in CONSTITUENTS:
            if constituent == "bn" and not self.training:
                moments.append((as_channel(self.running.mu), as_channel(self.running.var)))
            else:
                moments.append(reduce_mean_var(a, CONSTITUENT_AXES[constituent], keepdim=True))
        return moments

    def forward(self, a: Tensor) -> Tensor:
        self.check_input(a)
        if not self.training:
            self.warn_if_untracked()

        moments = self.constituent_moments(a)
        mean_weights, var_weights = self.blend.mean_weights, self.blend.var_weights
        mean = sum(w * mu for w, (mu, _) in zip(mean_weights, moments))
        var = sum(w * v for w, (_, v) in zip(var_weights, moments))

        inv_std = torch.rsqrt(var + self.epsilon)
        xhat = (a - mean) * inv_std

        if self.training:
            bn_mean, bn_var = moments[0]
            self.running.update(bn_mean.view(-1), bn_var.view(-1))
            self._store((a, xhat, inv_std, moments, mean_weights, var_weights))

        return self.apply_affine(xhat)

    def norm_backward(self, grad_out: Tensor) -> NormGrads:
        a, xhat, inv_std, moments, mean_weights, var_weights = self._require_cache()
        grad_xhat, grad_gamma, grad_beta = self.affine_backward(grad_out, xhat)

        # gradients w.r.t. the blended moments, shaped (B, C, 1, 1)
        grad_mean = -(grad_xhat * inv_std).sum(dim=(2, 3), keepdim=True)
        grad_var = -0.5 * (grad_xhat * xhat).sum(dim=(2, 3), keepdim=True) * inv_std.pow(2)

        grad_in = grad_xhat * inv_std
        grad_mean_weights = torch.empty_like(mean_weights)
        grad_var_weights = torch.empty_like(var_weights)

        for k, constituent in enumerate(CONSTITUENTS):
            axes = CONSTITUENT_AXES[constituent]
            mu_k, var_k = moments[k]
            n = reduced_count(a.shape, axes)

            grad_mean_weights[k] = (grad_mean * mu_k).sum()
            grad_var_weights[k] = (grad_var * var_k).sum()

            grad_mu_k = mean_weights[k] * grad_mean.sum(dim=axes, keepdim=True)
            grad_var_k = var_weights[k] * grad_var.sum(dim=axes, keepdim=True)
            grad_in = grad_in + grad_mu_k / n + grad_var_k * 2.0 * (a - mu_k) / n

        grad_blend = {
            "mean_logits": softmax_backward(grad_mean_weights, mean_weights),
            "var_logits": softmax_backward(grad_var_weights, var_weights),
        }
        return NormGrads(grad_in, grad_gamma, grad_beta, grad_blend)

    def bn_stage_input(self, a: Tensor) -> Tensor:
        return a


def sn_forward(a: Tensor, layer: SwitchNormalization, blend: Optional[SnBlendWeights], mode: Mode) -> Tensor:
    if blend is not None:
        layer.blend = blend
    layer.train(Mode(mode) == Mode.TRAIN)
    return layer(a)
