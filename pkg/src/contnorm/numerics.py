import logging
import math
import zlib
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

pylogger = logging.getLogger(__name__)

# Activations are dense rank-4 tensors (batch, channel, height, width); MLP activations use H=W=1.
FeatureMap = Tensor

AXIS_NAMES: Dict[str, int] = {"B": 0, "C": 1, "H": 2, "W": 3}

Axis = Union[int, str]


class ShapeError(ValueError):
    pass


def _fail(message: str) -> None:
    pylogger.error(message)
    raise ShapeError(message)


def check_feature_map(x: Tensor, name: str = "feature map") -> Tensor:
    """Validate the FeatureMap contract: rank 4, every dimension >= 1, finite values.

    :param x: tensor to validate
    :param name: used in the error message

    :return x, untouched
    """
    if x.dim() != 4:
        _fail(f"<{name}> must have rank 4 (B, C, H, W), got shape {tuple(x.shape)}")
    if any(size < 1 for size in x.shape):
        _fail(f"<{name}> has a zero-sized dimension: {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        _fail(f"<{name}> contains NaN or Inf values")
    return x


def normalize_axes(axes: Iterable[Axis], ndim: int = 4) -> Tuple[int, ...]:
    resolved = []
    for axis in axes:
        index = AXIS_NAMES[axis.upper()] if isinstance(axis, str) else int(axis)
        if not 0 <= index < ndim:
            _fail(f"Axis <{axis}> is not valid for a rank-{ndim} tensor")
        resolved.append(index)

    if not resolved:
        _fail("Empty reduction set")

    return tuple(sorted(set(resolved)))


def reduce_mean_var(x: Tensor, axes: Iterable[Axis], keepdim: bool = False) -> Tuple[Tensor, Tensor]:
    """Arithmetic mean and population variance (divide by the reduced count) over `axes`.

    Accumulation happens in float64 whatever the storage precision, the results are cast back to x.dtype.
    The variance uses the two-pass form, so it is never negative.

    :param x: tensor to reduce
    :param axes: axis indices or names among B, C, H, W
    :param keepdim: keep the reduced axes as singleton dimensions

    :return mean, var
    """
    dims = normalize_axes(axes, ndim=x.dim())
    if any(x.shape[d] == 0 for d in dims):
        _fail(f"Zero-sized axis in reduction over {dims} for shape {tuple(x.shape)}")

    x64 = x.to(torch.float64)
    mean = x64.mean(dim=dims, keepdim=True)
    var = (x64 - mean).pow(2).mean(dim=dims, keepdim=True)

    if not keepdim:
        mean, var = _squeeze(mean, dims), _squeeze(var, dims)

    return mean.to(x.dtype), var.to(x.dtype)


def _squeeze(x: Tensor, dims: Sequence[int]) -> Tensor:
    for d in sorted(dims, reverse=True):
        x = x.squeeze(d)
    return x


def reduced_count(shape: Sequence[int], axes: Iterable[int]) -> int:
    return math.prod(shape[d] for d in axes)


class MomentAccumulator:
    """Exact streaming per-channel mean and population variance.

    Batches are merged with the pairwise update of Chan et al. in float64, so the result equals the moments of
    the concatenated data up to rounding, independently of how the data is split into batches.
    """

    def __init__(self, axes: Iterable[Axis] = ("B", "H", "W")):
        self.axes = normalize_axes(axes)
        self.count = 0
        self.mean: Optional[Tensor] = None
        self.m2: Optional[Tensor] = None

    def update(self, x: Tensor) -> None:
        n = reduced_count(x.shape, self.axes)
        batch_mean, batch_var = reduce_mean_var(x.to(torch.float64), self.axes)
        batch_m2 = batch_var * n

        if self.mean is None:
            self.count, self.mean, self.m2 = n, batch_mean, batch_m2
            return

        total = self.count + n
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + batch_m2 + delta.pow(2) * (self.count * n / total)
        self.count = total

    @property
    def var(self) -> Tensor:
        if self.mean is None:
            raise ValueError("Cannot get moments before pushing any values")
        return self.m2 / self.count


UINT64_MASK = 0xFFFF_FFFF_FFFF_FFFF


def make_rng(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(seed) & UINT64_MASK)
    return generator


class RngStreams:
    """Named random sub-streams derived from one root seed.

    Each name maps to its own generator, seeded through numpy's SeedSequence from (root seed, crc32(name)), so
    consuming draws in one component never shifts the draws of another.
    """

    PERMUTATION = "permutation"
    INIT = "init"
    SHUFFLING = "shuffling"
    RESERVOIR = "reservoir"
    REPLAY = "replay"
    SYNTHETIC = "synthetic"
    SUBSET = "subset"

    def __init__(self, root_seed: int):
        # 64-bit seeds, negative ones wrap around like in make_rng
        self.root_seed = int(root_seed) & UINT64_MASK
        self._streams: Dict[str, torch.Generator] = {}

    def seed_for(self, name: str) -> int:
        sequence = np.random.SeedSequence([self.root_seed, zlib.crc32(name.encode("utf-8"))])
        return int(sequence.generate_state(1, dtype=np.uint64)[0])

    def get(self, name: str) -> torch.Generator:
        if name not in self._streams:
            self._streams[name] = make_rng(self.seed_for(name))
        return self._streams[name]


def seeded_permutation(rng: torch.Generator, n: int) -> Tensor:
    if n < 1:
        message = f"Cannot draw a permutation of <{n}> elements"
        pylogger.error(message)
        raise ValueError(message)
    return torch.randperm(n, generator=rng)
