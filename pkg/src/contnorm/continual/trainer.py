import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch

from contnorm.callbacks import Callback
from contnorm.continual.oracle import NO_BATCH_DEPENDENT_LAYERS, DriftRecord, bn_star_recalibrate, measure_drift
from contnorm.continual.strategies import Strategy
from contnorm.data.memory import EpisodicMemory
from contnorm.data.stream import Task, TaskStream
from contnorm.metrics import AccuracyMatrix
from contnorm.modules.optim import SgdConfig
from contnorm.modules.stack import LayerStack
from contnorm.numerics import RngStreams
from contnorm.utils import EvalSetting

pylogger = logging.getLogger(__name__)


@dataclass
class OnlineResult:
    """
    accuracy: accuracy matrix of the trained stack
    bn_star_accuracy: same matrix with the running statistics replaced by the oracle ones after every task
    drift: one record per task, distances between the running and the oracle moments
    """

    stack: LayerStack
    accuracy: AccuracyMatrix
    bn_star_accuracy: Optional[AccuracyMatrix] = None
    drift: List[DriftRecord] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    seconds: float = 0.0


@torch.no_grad()
def evaluate(
    stack: LayerStack,
    task: Task,
    num_classes: int,
    eval_setting: EvalSetting = EvalSetting.CLASS_IL,
    batch_size: int = 1000,
) -> float:
    """Eval-mode accuracy on the test set of `task`; task_il restricts the prediction to the task's classes."""
    stack.eval()
    dtype = stack.dtype
    mask = task.class_mask(num_classes) if EvalSetting(eval_setting) == EvalSetting.TASK_IL else None

    correct = 0
    for start in range(0, len(task.test), batch_size):
        x = task.test.images[start : start + batch_size].to(dtype)
        logits = stack.forward(x)
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        correct += int((logits.argmax(dim=1) == task.test.labels[start : start + batch_size]).sum())

    return correct / len(task.test)


def train_online(
    stream: TaskStream,
    stack: LayerStack,
    strategy: Strategy,
    memory: EpisodicMemory,
    sgd: SgdConfig,
    rngs: RngStreams,
    bn_star: bool = False,
    drift_tracking: bool = False,
    eval_setting: EvalSetting = EvalSetting.CLASS_IL,
    eval_batch_size: int = 1000,
    callbacks: Sequence[Callback] = (),
) -> OnlineResult:
    """Single-epoch online training over the stream.

    Every training sample of every task reaches the strategy exactly once, in batches of `sgd.batch_size`
    shuffled within the task. After task i the stack is evaluated on the test sets of tasks 1..i; when asked,
    a BN* oracle built on the training data of tasks 1..i is evaluated too and compared with the running
    statistics.
    """
    if strategy.uses_memory and memory.capacity == 0:
        message = f"Strategy <{type(strategy).__name__}> replays from memory but the memory capacity is 0"
        pylogger.error(message)
        raise ValueError(message)

    result = OnlineResult(stack=stack, accuracy=AccuracyMatrix(len(stream)))
    oracle_needed = (bn_star or drift_tracking) and bool(stack.norm_layers())
    if bn_star and oracle_needed:
        result.bn_star_accuracy = AccuracyMatrix(len(stream))
    if (bn_star or drift_tracking) and not oracle_needed:
        pylogger.warning(NO_BATCH_DEPENDENT_LAYERS)
        result.warnings.append(NO_BATCH_DEPENDENT_LAYERS)

    dtype = stack.dtype
    shuffling = rngs.get(RngStreams.SHUFFLING)
    start_time = time.perf_counter()

    for callback in callbacks:
        callback.on_train_start(stream, result)

    for task in stream:
        if len(task.train) == 0:
            message = f"Task <{task.task_id}> has no training data"
            pylogger.error(message)
            raise ValueError(message)

        order = torch.randperm(len(task.train), generator=shuffling)
        losses = []
        for start in range(0, len(order), sgd.batch_size):
            batch = order[start : start + sgd.batch_size]
            x = task.train.images[batch].to(dtype)
            y = task.train.labels[batch]
            losses.append(strategy.step(stack, x, y, task.task_id, memory, rngs, sgd))

        for seen in stream.tasks[: task.task_id]:
            result.accuracy.set(
                task.task_id, seen.task_id, evaluate(stack, seen, stream.num_classes, eval_setting, eval_batch_size)
            )

        if oracle_needed:
            oracle = bn_star_recalibrate(stack, stream.train_union(task.task_id), batch_size=eval_batch_size)
            if bn_star:
                for seen in stream.tasks[: task.task_id]:
                    accuracy = evaluate(oracle, seen, stream.num_classes, eval_setting, eval_batch_size)
                    result.bn_star_accuracy.set(task.task_id, seen.task_id, accuracy)
            if drift_tracking:
                result.drift.append(measure_drift(stack, oracle, after_task=task.task_id))

        for callback in callbacks:
            callback.on_task_end(task.task_id, result, sum(losses) / len(losses))

    stack.train()
    result.seconds = time.perf_counter() - start_time

    for callback in callbacks:
        callback.on_train_end(result)

    return result
