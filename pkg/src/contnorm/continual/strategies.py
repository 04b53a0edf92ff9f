import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
from torch import Tensor

from contnorm.data.memory import EpisodicMemory, MemoryItem
from contnorm.modules.losses.cross_entropy import cross_entropy_loss
from contnorm.modules.losses.mse import mse_loss
from contnorm.modules.optim import SgdConfig, accumulate, sgd_step
from contnorm.modules.stack import LayerStack
from contnorm.numerics import RngStreams
from contnorm.utils import StrategyKind

pylogger = logging.getLogger(__name__)


@dataclass
class StrategyConfig:
    kind: StrategyKind = StrategyKind.SINGLE
    replay_batch_size: int = 10
    der_alpha: float = 0.5
    der_beta: float = 0.5

    def __post_init__(self) -> None:
        self.kind = StrategyKind(self.kind)
        if self.replay_batch_size < 1 or self.der_alpha < 0 or self.der_beta < 0:
            message = f"Invalid strategy settings: {self}"
            pylogger.error(message)
            raise ValueError(message)


class Strategy(ABC):
    """One online update on an incoming stream batch, plus the memory bookkeeping that follows it."""

    uses_memory = True

    def __init__(self, config: StrategyConfig) -> None:
        self.config = config

    def step(
        self,
        stack: LayerStack,
        x: Tensor,
        y: Tensor,
        task_id: int,
        memory: EpisodicMemory,
        rngs: RngStreams,
        sgd: SgdConfig,
    ) -> float:
        """
        :return loss on the stream batch (replay terms excluded)
        """
        stack.train()
        loss, grads, logits = self.compute_gradients(stack, x, y, memory, rngs)
        sgd_step(stack, grads, sgd)

        if self.uses_memory:
            self.remember(memory, x, y, task_id, logits, rngs)
        return loss

    @abstractmethod
    def compute_gradients(
        self, stack: LayerStack, x: Tensor, y: Tensor, memory: EpisodicMemory, rngs: RngStreams
    ) -> Tuple[float, Dict[str, Tensor], Tensor]:
        raise NotImplementedError

    def remember(
        self,
        memory: EpisodicMemory,
        x: Tensor,
        y: Tensor,
        task_id: int,
        logits: Optional[Tensor],
        rngs: RngStreams,
    ) -> None:
        rng = rngs.get(RngStreams.RESERVOIR)
        for i in range(x.shape[0]):
            memory.insert(MemoryItem(x=x[i].clone(), y=int(y[i]), task_id=task_id), rng)


class Single(Strategy):
    """Plain cross-entropy on the incoming batch, no memory."""

    uses_memory = False

    def compute_gradients(self, stack, x, y, memory, rngs):
        logits = stack.forward(x)
        loss, grad_logits = cross_entropy_loss(logits, y)
        _, grads = stack.backward(grad_logits)
        return loss, grads, logits


class ExperienceReplay(Strategy):
    """A single cross-entropy over the incoming batch concatenated with a memory sample."""

    def compute_gradients(self, stack, x, y, memory, rngs):
        replay = memory.sample(self.config.replay_batch_size, rngs.get(RngStreams.REPLAY))
        batch_size = x.shape[0]

        if replay is not None:
            x = torch.cat([x, replay.images.to(x.dtype)])
            y = torch.cat([y, replay.labels])

        logits = stack.forward(x)
        loss, grad_logits = cross_entropy_loss(logits, y)
        _, grads = stack.backward(grad_logits)

        stream_loss, _ = cross_entropy_loss(logits[:batch_size], y[:batch_size])
        return stream_loss, grads, logits[:batch_size]


class DarkExperienceReplayPlusPlus(Strategy):
    """CE on the stream + alpha * MSE to the logits stored with a memory sample + beta * CE on a second sample.

    Each term has its own train-mode forward; their gradients are summed before the single SGD step.
    """

    def compute_gradients(self, stack, x, y, memory, rngs):
        logits = stack.forward(x)
        loss, grad_logits = cross_entropy_loss(logits, y)
        _, grads = stack.backward(grad_logits)
        stream_logits = logits.detach().clone()

        rng = rngs.get(RngStreams.REPLAY)

        logit_replay = memory.sample(self.config.replay_batch_size, rng)
        if logit_replay is not None and self.config.der_alpha > 0:
            replay_logits = stack.forward(logit_replay.images.to(x.dtype))
            _, grad_mse = mse_loss(replay_logits, logit_replay.logits)
            _, replay_grads = stack.backward(grad_mse)
            grads = accumulate(grads, replay_grads, self.config.der_alpha)

        label_replay = memory.sample(self.config.replay_batch_size, rng)
        if label_replay is not None and self.config.der_beta > 0:
            replay_logits = stack.forward(label_replay.images.to(x.dtype))
            _, grad_ce = cross_entropy_loss(replay_logits, label_replay.labels)
            _, replay_grads = stack.backward(grad_ce)
            grads = accumulate(grads, replay_grads, self.config.der_beta)

        return loss, grads, stream_logits

    def remember(self, memory, x, y, task_id, logits, rngs):
        rng = rngs.get(RngStreams.RESERVOIR)
        for i in range(x.shape[0]):
            item = MemoryItem(x=x[i].clone(), y=int(y[i]), task_id=task_id, logits=logits[i].clone())
            memory.insert(item, rng)


STRATEGIES = {
    StrategyKind.SINGLE: Single,
    StrategyKind.ER: ExperienceReplay,
    StrategyKind.DERPP: DarkExperienceReplayPlusPlus,
}


def build_strategy(config: StrategyConfig) -> Strategy:
    return STRATEGIES[StrategyKind(config.kind)](config)
