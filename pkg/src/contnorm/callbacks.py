import logging
import time
from typing import TYPE_CHECKING, Any, List

import hydra
import numpy as np
from omegaconf import ListConfig

if TYPE_CHECKING:
    from contnorm.continual.trainer import OnlineResult
    from contnorm.data.stream import TaskStream

pylogger = logging.getLogger(__name__)


class Callback:
    """Hooks called by the online training loop; all of them are no-ops by default."""

    def on_train_start(self, stream: "TaskStream", result: "OnlineResult") -> None:
        pass

    def on_task_end(self, task_id: int, result: "OnlineResult", mean_loss: float) -> None:
        pass

    def on_train_end(self, result: "OnlineResult") -> None:
        pass


class TaskProgressCallback(Callback):
    def __init__(self, precision: int = 4) -> None:
        super().__init__()
        self.precision = precision

    def on_task_end(self, task_id: int, result: "OnlineResult", mean_loss: float) -> None:
        row = np.round(result.accuracy.row(task_id), self.precision).tolist()
        message = f"Task <{task_id}> done, mean stream loss {mean_loss:.4f}, accuracy row {row}"
        if result.bn_star_accuracy is not None:
            star_row = np.round(result.bn_star_accuracy.row(task_id), self.precision).tolist()
            message += f", BN* row {star_row}"
        pylogger.info(message)


class LogTrainingTimeCallback(Callback):
    def __init__(self) -> None:
        super().__init__()
        self.start_time = 0.0
        self.seconds = 0.0

    def on_train_start(self, stream: "TaskStream", result: "OnlineResult") -> None:
        self.start_time = time.perf_counter()

    def on_train_end(self, result: "OnlineResult") -> None:
        self.seconds = time.perf_counter() - self.start_time
        pylogger.info(f"Training time: {self.seconds:.2f}s")


def build_callbacks(cfg: ListConfig, *args: Any) -> List[Callback]:
    """Instantiate the callbacks given their configuration.
    Args:
        cfg: a list of callbacks instantiable configuration
        *args: a list of extra callbacks already instantiated
    Returns:
        the complete list of callbacks to use
    """
    callbacks: List[Callback] = list(args)

    for callback in cfg:
        pylogger.info(f"Adding callback <{callback['_target_'].split('.')[-1]}>")
        callbacks.append(hydra.utils.instantiate(callback, _recursive_=False))

    return callbacks
