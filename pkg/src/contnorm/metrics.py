import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

pylogger = logging.getLogger(__name__)


class AccuracyMatrix:
    """a[i, j]: accuracy on the test set of task j after training on task i, defined for j <= i.

    Indices are 1-based as in the task ids; the upper triangle is stored as NaN.
    """

    def __init__(self, n_tasks: int) -> None:
        if n_tasks < 1:
            message = f"An accuracy matrix needs at least one task, got <{n_tasks}>"
            pylogger.error(message)
            raise ValueError(message)
        self.n_tasks = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        matrix = cls(len(rows))
        for i, row in enumerate(rows, start=1):
            if len(row) != i:
                message = f"Row {i} of a lower-triangular matrix needs {i} entries, got {len(row)}"
                pylogger.error(message)
                raise ValueError(message)
            for j, value in enumerate(row, start=1):
                matrix.set(i, j, value)
        return matrix

    def set(self, after_task: int, eval_task: int, accuracy: float) -> None:
        if not 1 <= eval_task <= after_task <= self.n_tasks:
            message = f"Entry ({after_task}, {eval_task}) is outside the lower triangle of a {self.n_tasks}-task matrix"
            pylogger.error(message)
            raise IndexError(message)
        if not 0.0 <= accuracy <= 1.0:
            message = f"Accuracy must lie in [0, 1], got <{accuracy}>"
            pylogger.error(message)
            raise ValueError(message)
        self.values[after_task - 1, eval_task - 1] = accuracy

    def get(self, after_task: int, eval_task: int) -> float:
        return float(self.values[after_task - 1, eval_task - 1])

    def row(self, after_task: int) -> np.ndarray:
        return self.values[after_task - 1, :after_task].copy()

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values[np.tril_indices(self.n_tasks)]).any()

    def entries(self):
        """(after_task, eval_task, accuracy) for every defined entry, row-major."""
        for i in range(1, self.n_tasks + 1):
            for j in range(1, i + 1):
                if not np.isnan(self.values[i - 1, j - 1]):
                    yield i, j, float(self.values[i - 1, j - 1])


def acc(m: AccuracyMatrix) -> float:
    """Average accuracy over all tasks after the last one."""
    return float(np.mean(m.row(m.n_tasks)))


def fm(m: AccuracyMatrix) -> Optional[float]:
    """Forgetting: mean over the first T-1 tasks of (best accuracy before the end) - (final accuracy).
    None for a single task."""
    if m.n_tasks < 2:
        return None
    final = m.row(m.n_tasks)
    forgetting = [np.max(m.values[j - 1 : m.n_tasks - 1, j - 1]) - final[j - 1] for j in range(1, m.n_tasks)]
    return float(np.mean(forgetting))


def la(m: AccuracyMatrix) -> float:
    """Learning accuracy: mean of the diagonal."""
    return float(np.mean(np.diag(m.values)))


def mean_std(values: Sequence[float]) -> Dict[str, Optional[float]]:
    """Mean and sample standard deviation (None with fewer than two values)."""
    array = np.asarray(values, dtype=np.float64)
    std = float(np.std(array, ddof=1)) if array.size > 1 else None
    return {"mean": float(np.mean(array)), "std": std}


def summarize(m: AccuracyMatrix) -> Tuple[float, Optional[float], float]:
    return acc(m), fm(m), la(m)
