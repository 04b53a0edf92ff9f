from torch import Tensor


def flat_logits(logits: Tensor) -> Tensor:
    """(B, Y) view of logits coming out of a stack as (B, Y, 1, 1)."""
    return logits.reshape(logits.shape[0], -1)
