import logging
from dataclasses import dataclass, field
from typing import List, Optional

import torch

from contnorm.data.io_utils import ImageDataset
from contnorm.modules.stack import LayerStack
from contnorm.numerics import MomentAccumulator

pylogger = logging.getLogger(__name__)

NO_BATCH_DEPENDENT_LAYERS = "no batch-dependent normalization layer: BN* recalibration and drift are skipped"


@dataclass
class LayerDrift:
    """
    layer: 1-based position among the batch-dependent layers of the stack
    name: layer name in the stack, e.g. 2.bn
    """

    layer: int
    name: str
    delta_mu: float
    delta_var: float


@dataclass
class DriftRecord:
    after_task: Optional[int] = None
    layers: List[LayerDrift] = field(default_factory=list)

    def __getitem__(self, layer: int) -> LayerDrift:
        return self.layers[layer - 1]


@torch.no_grad()
def bn_star_recalibrate(stack: LayerStack, data: ImageDataset, batch_size: int = 1000) -> LayerStack:
    """Oracle copy of `stack` whose running statistics are the exact moments of `data`.

    Layers are recalibrated in order: the input of layer k is computed in eval mode by the copy whose first k-1
    batch-dependent layers already hold their exact moments. Parameters are untouched and `stack` is not
    modified.

    :param stack: trained stack
    :param data: training data of every task to cover
    :param batch_size: chunk size of the streaming accumulation; does not change the result
    """
    oracle = stack.clone().eval()
    layers = oracle.norm_layers()
    if not layers:
        pylogger.warning(NO_BATCH_DEPENDENT_LAYERS)
        return oracle

    dtype = oracle.dtype
    for index, layer in layers:
        accumulator = MomentAccumulator(axes=("B", "H", "W"))
        for start in range(0, len(data), batch_size):
            x = data.images[start : start + batch_size].to(dtype)
            accumulator.update(layer.bn_stage_input(oracle.forward_until(x, index)))

        layer.running.load(accumulator.mean.to(layer.running.mu.dtype), accumulator.var.to(layer.running.var.dtype))
        pylogger.debug(f"Recalibrated <{index}.{layer.name}> over <{accumulator.count}> values per channel")

    return oracle


def measure_drift(stack: LayerStack, oracle: LayerStack, after_task: Optional[int] = None) -> DriftRecord:
    """Per batch-dependent layer, the L1 distances between the running moments of `stack` and of `oracle`."""
    if stack.layer_names != oracle.layer_names:
        message = f"Cannot compare stacks with different structure: {stack.layer_names} vs {oracle.layer_names}"
        pylogger.error(message)
        raise ValueError(message)

    record = DriftRecord(after_task=after_task)
    oracle_layers = dict(oracle.norm_layers())
    for k, (index, layer) in enumerate(stack.norm_layers(), start=1):
        reference = oracle_layers[index].running
        record.layers.append(
            LayerDrift(
                layer=k,
                name=f"{index}.{layer.name}",
                delta_mu=float((layer.running.mu.double() - reference.mu.double()).abs().sum()),
                delta_var=float((layer.running.var.double() - reference.var.double()).abs().sum()),
            )
        )
    return record
