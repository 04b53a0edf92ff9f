import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from contnorm.modules.layers import Gradients, Layer, frozen
from contnorm.numerics import ShapeError, reduce_mean_var
from contnorm.utils import MovingAverage, NormKind, VariantOrder

pylogger = logging.getLogger(__name__)

# Moments broadcast as (1, C, 1, 1) when they are per channel.
CHANNEL_AXES = (0, 2, 3)


@dataclass
class NormLayerSpec:
    """
    kind: which normalization layer
    channels: C
    groups: G, only read by GN and the CN family; C must be divisible by G
    epsilon: added to the variance (to the standard deviation for BRN)
    eta: running-average momentum of the batch-dependent stage
    moving_average: EMA or CMA running statistics
    brn_rmax, brn_dmax: clipping bounds of the renormalization corrections
    variant_order, tied_affine: composition of the CN variants
    """

    kind: NormKind
    channels: int
    groups: int = 32
    epsilon: float = 1e-5
    eta: float = 0.1
    moving_average: MovingAverage = MovingAverage.EMA
    brn_rmax: float = 3.0
    brn_dmax: float = 5.0
    variant_order: VariantOrder = VariantOrder.GN_THEN_BN
    tied_affine: bool = False

    def __post_init__(self) -> None:
        self.kind = NormKind(self.kind)
        self.moving_average = MovingAverage(self.moving_average)
        self.variant_order = VariantOrder(self.variant_order)

        if self.channels < 1:
            self._fail(f"Normalization needs at least one channel, got <{self.channels}>")
        if self.epsilon <= 0:
            self._fail(f"Epsilon must be positive, got <{self.epsilon}>")
        if not 0 < self.eta <= 1:
            self._fail(f"Momentum must lie in (0, 1], got <{self.eta}>")
        if self.kind in (NormKind.GN, NormKind.CN, NormKind.CN_VARIANT):
            if self.groups < 1 or self.channels % self.groups != 0:
                self._fail(f"<{self.kind}> needs C mod G = 0, got C={self.channels}, G={self.groups}")
        if self.kind == NormKind.BRN and (self.brn_rmax < 1 or self.brn_dmax < 0):
            self._fail(f"BRN needs r_max >= 1 and d_max >= 0, got {self.brn_rmax}, {self.brn_dmax}")

    @staticmethod
    def _fail(message: str) -> None:
        pylogger.error(message)
        raise ValueError(message)


@dataclass
class AffineParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, channels: int, dtype: torch.dtype = torch.float32) -> "AffineParams":
        return cls(gamma=torch.ones(channels, dtype=dtype), beta=torch.zeros(channels, dtype=dtype))

    def apply(self, xhat: Tensor) -> Tensor:
        return xhat * as_channel(self.gamma) + as_channel(self.beta)


class RunningStats(nn.Module):
    """Running per-channel moments, kept as buffers so they travel with the state dict."""

    def __init__(
        self,
        mu: Tensor,
        var: Tensor,
        eta: float = 0.1,
        mode: MovingAverage = MovingAverage.EMA,
        batch_count: int = 0,
    ) -> None:
        super().__init__()
        self.eta = eta
        self.mode = MovingAverage(mode)
        self.register_buffer("mu", mu)
        self.register_buffer("var", var)
        self.register_buffer("batch_count", torch.tensor(int(batch_count), dtype=torch.int64))

    @classmethod
    def initial(
        cls, channels: int, eta: float, mode: MovingAverage, dtype: torch.dtype = torch.float32
    ) -> "RunningStats":
        return cls(mu=torch.zeros(channels, dtype=dtype), var=torch.ones(channels, dtype=dtype), eta=eta, mode=mode)

    def update(self, mu_batch: Tensor, var_batch: Tensor) -> "RunningStats":
        return running_update(self, mu_batch, var_batch)

    def load(self, mu: Tensor, var: Tensor, batch_count: Optional[int] = None) -> None:
        self.mu.copy_(mu)
        self.var.copy_(var.clamp_min(0))
        if batch_count is not None:
            self.batch_count.fill_(int(batch_count))

    def extra_repr(self) -> str:
        return f"{self.mode}, eta={self.eta}"


def running_update(stats: RunningStats, mu_batch: Tensor, var_batch: Tensor) -> RunningStats:
    """Fold one batch of moments into the running statistics, in place.

    EMA: x <- x + eta * (x_batch - x). CMA: x is the plain mean of every batch moment seen so far.
    Both count the batches, the count only changes the arithmetic of CMA.
    """
    mu_batch = mu_batch.to(stats.mu.dtype)
    var_batch = var_batch.to(stats.var.dtype)

    if stats.mode == MovingAverage.CMA:
        rate = 1.0 / (int(stats.batch_count) + 1)
    else:
        rate = stats.eta

    stats.mu.add_(mu_batch - stats.mu, alpha=rate)
    stats.var.add_(var_batch - stats.var, alpha=rate).clamp_(min=0)
    stats.batch_count += 1
    return stats


def as_channel(v: Tensor) -> Tensor:
    return v.view(1, -1, 1, 1)


def z_normalize(
    a: Tensor, mu: Tensor, var: Tensor, params: Optional[AffineParams] = None, epsilon: float = 1e-5
) -> Tensor:
    """a' = gamma * (a - mu) / sqrt(var + eps) + beta, with moments broadcastable to a's shape."""
    try:
        shape = torch.broadcast_shapes(a.shape, mu.shape, var.shape)
    except RuntimeError as e:
        message = f"Moments {tuple(mu.shape)}, {tuple(var.shape)} do not broadcast to {tuple(a.shape)}"
        pylogger.error(message)
        raise ShapeError(message) from e
    if tuple(shape) != tuple(a.shape):
        raise ShapeError(f"Moments would change the feature map shape {tuple(a.shape)} into {tuple(shape)}")

    xhat = (a - mu) / torch.sqrt(var + epsilon)
    return xhat if params is None else params.apply(xhat)


def standardize(x: Tensor, dims: Sequence[int], epsilon: float) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """
    :return xhat, mean, var and 1/sqrt(var + eps), the moments keeping the reduced dims as singletons
    """
    mean, var = reduce_mean_var(x, dims, keepdim=True)
    inv_std = torch.rsqrt(var + epsilon)
    return (x - mean) * inv_std, mean, var, inv_std


def standardize_backward(grad_xhat: Tensor, xhat: Tensor, inv_std: Tensor, dims: Sequence[int]) -> Tensor:
    """Gradient through xhat = (x - mean(x)) / sqrt(var(x) + eps), moments taken over `dims`."""
    mean_grad = grad_xhat.mean(dim=tuple(dims), keepdim=True)
    mean_grad_xhat = (grad_xhat * xhat).mean(dim=tuple(dims), keepdim=True)
    return inv_std * (grad_xhat - mean_grad - xhat * mean_grad_xhat)


class NormGrads(NamedTuple):
    grad_in: Tensor
    grad_gamma: Optional[Tensor]
    grad_beta: Optional[Tensor]
    grad_blend: Optional[Dict[str, Tensor]] = None


class NormLayer(Layer):
    """Common state of the normalization layers: optional affine pair and optional running statistics."""

    name = "norm"

    def __init__(
        self, spec: NormLayerSpec, affine: bool = True, running: bool = False, dtype: torch.dtype = torch.float32
    ) -> None:
        super().__init__()
        self.spec = spec
        self.channels = spec.channels
        self.epsilon = spec.epsilon
        if affine:
            identity = AffineParams.identity(spec.channels, dtype)
            self.gamma, self.beta = frozen(identity.gamma), frozen(identity.beta)
        else:
            self.register_parameter("gamma", None)
            self.register_parameter("beta", None)
        self.running_stats: Optional[RunningStats] = (
            RunningStats.initial(spec.channels, spec.eta, spec.moving_average, dtype) if running else None
        )

    @property
    def kind(self) -> NormKind:
        return self.spec.kind

    @property
    def affine(self) -> Optional[AffineParams]:
        return None if self.gamma is None else AffineParams(gamma=self.gamma, beta=self.beta)

    @property
    def running(self) -> Optional[RunningStats]:
        return self.running_stats

    @property
    def batch_dependent(self) -> bool:
        return self.running is not None

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if input_shape[0] != self.channels:
            raise ShapeError(f"<{self.kind}> over {self.channels} channels cannot take {tuple(input_shape)}")
        return input_shape

    def apply_affine(self, xhat: Tensor) -> Tensor:
        return xhat if self.affine is None else self.affine.apply(xhat)

    def affine_backward(self, grad_out: Tensor, xhat: Tensor) -> Tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
        """
        :return gradient w.r.t. xhat, gamma and beta (None without affine)
        """
        if self.affine is None:
            return grad_out, None, None
        grad_gamma = (grad_out * xhat).sum(dim=CHANNEL_AXES)
        grad_beta = grad_out.sum(dim=CHANNEL_AXES)
        return grad_out * as_channel(self.affine.gamma), grad_gamma, grad_beta

    def check_input(self, a: Tensor) -> None:
        if a.dim() != 4 or a.shape[1] != self.channels:
            message = f"<{self.kind}> over {self.channels} channels got input of shape {tuple(a.shape)}"
            pylogger.error(message)
            raise ShapeError(message)

    def warn_if_untracked(self) -> None:
        if self.running is not None and self.running.batch_count == 0:
            pylogger.warning(f"<{self.kind}> evaluated before any running-statistics update, using mu=0, var=1")

    def bn_stage_input(self, a: Tensor) -> Tensor:
        """The tensor whose per-channel moments the running statistics estimate, computed without side effects."""
        raise NotImplementedError(f"<{self.kind}> keeps no running statistics")

    def norm_backward(self, grad_out: Tensor) -> NormGrads:
        raise NotImplementedError

    def backward(self, grad_out: Tensor) -> Tuple[Tensor, Gradients]:
        result = self.norm_backward(grad_out)
        grads: Gradients = {}
        if result.grad_gamma is not None:
            grads["gamma"] = result.grad_gamma
            grads["beta"] = result.grad_beta
        if result.grad_blend is not None:
            grads.update(result.grad_blend)
        return result.grad_in, grads

    def extra_repr(self) -> str:
        return f"C={self.channels}"


def norm_backward(layer: NormLayer, grad_out: Tensor) -> NormGrads:
    return layer.norm_backward(grad_out)
