import logging
from typing import Optional, Tuple

import torch
from torch import Tensor
from torch.nn import functional as F

from contnorm.modules.losses.utils import flat_logits

pylogger = logging.getLogger(__name__)


def cross_entropy_loss(logits: Tensor, labels: Tensor, mask: Optional[Tensor] = None) -> Tuple[float, Tensor]:
    """Mean negative log-softmax of the true class.

    :param logits: (B, Y) or (B, Y, 1, 1)
    :param labels: (B,) integer labels in {0..Y-1}
    :param mask: optional (B, Y) boolean mask of the admissible classes; masked-out logits get zero probability

    :return loss value, gradient w.r.t. the logits in their input shape, (softmax - onehot) / B
    """
    scores = flat_logits(logits)
    num_classes = scores.shape[1]

    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        message = f"Labels must lie in [0, {num_classes - 1}], got range [{labels.min()}, {labels.max()}]"
        pylogger.error(message)
        raise ValueError(message)

    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))

    log_probs = F.log_softmax(scores, dim=1)
    batch_size = scores.shape[0]
    loss = -log_probs.gather(1, labels.view(-1, 1)).mean()

    grad = log_probs.exp()
    grad[torch.arange(batch_size), labels] -= 1.0
    grad /= batch_size

    return float(loss), grad.reshape(logits.shape)
