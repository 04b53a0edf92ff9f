import logging
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional

import torch
from torch import Tensor

from contnorm.utils import MemoryPolicy

pylogger = logging.getLogger(__name__)


@dataclass
class MemoryItem:
    x: Tensor
    y: int
    task_id: int
    logits: Optional[Tensor] = None


@dataclass
class MemoryBatch:
    images: Tensor
    labels: Tensor
    task_ids: Tensor
    logits: Optional[Tensor] = None

    def __len__(self) -> int:
        return self.labels.shape[0]


class EpisodicMemory:
    """Bounded replay store.

    ring: one FIFO segment per task, each holding at most `per_task_quota` items.
    reservoir: a single pool where, after n insertions, every inserted item is present with probability
    capacity / n.
    """

    def __init__(self, capacity: int, policy: MemoryPolicy = MemoryPolicy.RING, per_task_quota: int = 50) -> None:
        if capacity < 0:
            message = f"Memory capacity must be non negative, got <{capacity}>"
            pylogger.error(message)
            raise ValueError(message)

        self.capacity = capacity
        self.policy = MemoryPolicy(policy)
        self.per_task_quota = per_task_quota

        self.segments: Dict[int, Deque[MemoryItem]] = {}
        self.slots: List[MemoryItem] = []
        self.seen_count = 0

    def __len__(self) -> int:
        if self.policy == MemoryPolicy.RING:
            return sum(len(segment) for segment in self.segments.values())
        return len(self.slots)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def items(self) -> List[MemoryItem]:
        if self.policy == MemoryPolicy.RING:
            return [item for task_id in sorted(self.segments) for item in self.segments[task_id]]
        return list(self.slots)

    def insert(self, item: MemoryItem, rng: torch.Generator) -> "EpisodicMemory":
        if self.capacity == 0:
            return self

        self.seen_count += 1

        if self.policy == MemoryPolicy.RING:
            segment = self.segments.setdefault(item.task_id, deque(maxlen=self.per_task_quota))
            if len(segment) < self.per_task_quota and len(self) >= self.capacity:
                pylogger.debug(f"Memory full, dropping an item of task <{item.task_id}>")
                return self
            segment.append(item)
            return self

        if self.seen_count <= self.capacity:
            self.slots.append(item)
        else:
            slot = int(torch.randint(0, self.seen_count, (1,), generator=rng))
            if slot < self.capacity:
                self.slots[slot] = item
        return self

    def sample(self, size: int, rng: torch.Generator) -> Optional[MemoryBatch]:
        """Uniform sample without replacement of min(size, len(memory)) items; None when empty."""
        items = self.items()
        if not items or size <= 0:
            return None

        chosen = torch.randperm(len(items), generator=rng)[: min(size, len(items))]
        picked = [items[i] for i in chosen.tolist()]

        logits = None
        if all(item.logits is not None for item in picked):
            logits = torch.stack([item.logits for item in picked])

        return MemoryBatch(
            images=torch.stack([item.x for item in picked]),
            labels=torch.tensor([item.y for item in picked], dtype=torch.int64),
            task_ids=torch.tensor([item.task_id for item in picked], dtype=torch.int64),
            logits=logits,
        )

    def __repr__(self) -> str:
        return f"{type(self).__name__}(policy={self.policy}, size={len(self)}/{self.capacity})"


def memory_insert(memory: EpisodicMemory, item: MemoryItem, rng: torch.Generator) -> EpisodicMemory:
    return memory.insert(item, rng)
