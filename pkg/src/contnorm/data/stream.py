import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import torch
from torch import Tensor

from contnorm.data.io_utils import ImageDataset
from contnorm.numerics import RngStreams, seeded_permutation
from contnorm.utils import StreamKind

pylogger = logging.getLogger(__name__)


@dataclass
class Task:
    """
    task_id: 1-based position in the stream
    classes: labels this task can produce, used to mask logits in the task-incremental evaluation
    permutation: pixel permutation applied to the base images (permuted streams only)
    """

    task_id: int
    train: ImageDataset
    test: ImageDataset
    classes: Tuple[int, ...]
    permutation: Optional[Tensor] = None

    def class_mask(self, num_classes: int) -> Tensor:
        mask = torch.zeros(num_classes, dtype=torch.bool)
        mask[list(self.classes)] = True
        return mask


@dataclass
class TaskStream:
    kind: StreamKind
    tasks: List[Task]
    num_classes: int
    input_shape: Tuple[int, int, int]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks)

    def __getitem__(self, index: int) -> Task:
        return self.tasks[index]

    def train_union(self, up_to: Optional[int] = None) -> ImageDataset:
        """Training data of the first `up_to` tasks (all tasks by default), concatenated in stream order."""
        tasks = self.tasks[: len(self.tasks) if up_to is None else up_to]
        return ImageDataset(
            images=torch.cat([task.train.images for task in tasks]),
            labels=torch.cat([task.train.labels for task in tasks]),
        )


def permute_pixels(images: Tensor, permutation: Tensor) -> Tensor:
    flat = images.reshape(images.shape[0], -1)
    return flat[:, permutation].reshape(images.shape)


def _sample(dataset: ImageDataset, size: Optional[int], rng: torch.Generator, split: str) -> ImageDataset:
    if size is None:
        return dataset
    if size > len(dataset):
        message = f"Asked for <{size}> {split} samples per task, the base {split} set only has <{len(dataset)}>"
        pylogger.error(message)
        raise ValueError(message)
    indices = seeded_permutation(rng, len(dataset))[:size]
    return dataset.subset(indices)


def build_pmnist_stream(
    train_set: ImageDataset,
    test_set: ImageDataset,
    n_tasks: int,
    train_per_task: int,
    seed: int,
    test_per_task: Optional[int] = None,
    identity_first_task: bool = False,
) -> TaskStream:
    """Permuted-MNIST stream: every task applies its own fixed pixel permutation to the same base data.

    Each task draws its own training subset without replacement; the test set (all of it by default) gets the
    task's permutation. All tasks share the ten labels.

    :param seed: root seed; permutations and subsets come from separate named sub-streams
    :param identity_first_task: task 1 keeps the original pixel order
    """
    if n_tasks < 1:
        message = f"A stream needs at least one task, got <{n_tasks}>"
        pylogger.error(message)
        raise ValueError(message)

    streams = RngStreams(seed)
    permutation_rng = streams.get(RngStreams.PERMUTATION)
    subset_rng = streams.get(RngStreams.SUBSET)
    num_pixels = math.prod(train_set.images.shape[1:])
    num_classes = int(train_set.labels.max()) + 1

    tasks = []
    for task_id in range(1, n_tasks + 1):
        if task_id == 1 and identity_first_task:
            permutation = torch.arange(num_pixels)
        else:
            permutation = seeded_permutation(permutation_rng, num_pixels)

        train = _sample(train_set, train_per_task, subset_rng, "train")
        test = _sample(test_set, test_per_task, subset_rng, "test")

        tasks.append(
            Task(
                task_id=task_id,
                train=ImageDataset(permute_pixels(train.images, permutation), train.labels),
                test=ImageDataset(permute_pixels(test.images, permutation), test.labels),
                classes=tuple(range(num_classes)),
                permutation=permutation,
            )
        )

    pylogger.info(f"Built <pmnist> stream: {n_tasks} tasks, {train_per_task} train / {len(tasks[0].test)} test each")
    return TaskStream(
        kind=StreamKind.PMNIST,
        tasks=tasks,
        num_classes=num_classes,
        input_shape=tuple(train_set.images.shape[1:]),
    )


def render_blobs(centers: Tensor, image_size: int, sigma: float) -> Tensor:
    """(N, 2) blob centers in pixel coordinates -> (N, 1, S, S) Gaussian bumps with peak 1."""
    coords = torch.arange(image_size, dtype=torch.float32)
    dy = coords.view(1, -1, 1) - centers[:, 0].view(-1, 1, 1)
    dx = coords.view(1, 1, -1) - centers[:, 1].view(-1, 1, 1)
    return torch.exp(-(dx.pow(2) + dy.pow(2)) / (2 * sigma**2)).unsqueeze(1)


def build_split_synthetic_stream(
    n_tasks: int,
    train_per_task: int,
    test_per_task: int,
    seed: int,
    image_size: int = 8,
    blob_sigma: float = 1.5,
    jitter: float = 0.75,
    noise: float = 0.1,
) -> TaskStream:
    """Generated, non-MNIST data for the convolutional path: two classes per task, disjoint across tasks.

    Every class is a Gaussian blob with its own center on a 1 x S x S canvas; samples jitter the center and add
    pixel noise, then clip to [0, 1].
    """
    if n_tasks < 1 or train_per_task < 2 or test_per_task < 2:
        message = f"Invalid split stream sizes: {n_tasks} tasks, {train_per_task} train, {test_per_task} test"
        pylogger.error(message)
        raise ValueError(message)

    rng = RngStreams(seed).get(RngStreams.SYNTHETIC)
    num_classes = 2 * n_tasks
    margin = blob_sigma
    class_centers = margin + torch.rand(num_classes, 2, generator=rng) * (image_size - 1 - 2 * margin)

    def draw(classes: Tuple[int, int], size: int) -> ImageDataset:
        labels = torch.tensor(classes).repeat_interleave(math.ceil(size / 2))[:size]
        labels = labels[seeded_permutation(rng, size)]
        centers = class_centers[labels] + jitter * torch.randn(size, 2, generator=rng)
        images = render_blobs(centers, image_size, blob_sigma)
        images = (images + noise * torch.randn(images.shape, generator=rng)).clamp(0.0, 1.0)
        return ImageDataset(images=images, labels=labels.long())

    tasks = []
    for task_id in range(1, n_tasks + 1):
        classes = (2 * (task_id - 1), 2 * (task_id - 1) + 1)
        tasks.append(Task(task_id, draw(classes, train_per_task), draw(classes, test_per_task), classes))

    pylogger.info(f"Built <split_synthetic> stream: {n_tasks} tasks of 2 classes, {image_size}x{image_size} images")
    return TaskStream(
        kind=StreamKind.SPLIT_SYNTHETIC,
        tasks=tasks,
        num_classes=num_classes,
        input_shape=(1, image_size, image_size),
        metadata={"synthetic": True},
    )
