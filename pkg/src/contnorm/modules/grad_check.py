import logging
from dataclasses import dataclass, field
from typing import Dict

import torch
from torch import Tensor

from contnorm.modules.losses.cross_entropy import cross_entropy_loss
from contnorm.modules.stack import LayerStack

pylogger = logging.getLogger(__name__)

INPUT_KEY = "input"


@dataclass
class GradCheckReport:
    """Max relative error between backward and central finite differences, per layer (and for the input).

    The error is normwise: max|a - n| over a whole gradient tensor, divided by max(max|a|, max|n|, 1e-3). Below
    the 1e-3 floor it acts as an absolute error, so layers whose gradients are all tiny are held to an absolute
    tolerance rather than a relative one.
    """

    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-3) -> float:
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), floor)
    return (analytic - numeric).abs().max().item() / scale


def grad_check(
    stack: LayerStack, x: Tensor, labels: Tensor, tolerance: float = 1e-5, step: float = 1e-5
) -> GradCheckReport:
    """Compare the stack's backward with central finite differences on every parameter and input element.

    Every loss evaluation is a train-mode forward from the same starting state: the state is restored before
    each one, and the quantities that backward treats as constants are held at their values of the analytic
    pass. The stack is left in its starting state.

    :param stack: small stack, double precision recommended
    :param x: input batch
    :param labels: integer labels
    :param tolerance: pass threshold on the max relative error
    :param step: finite-difference step h
    """
    if x.dtype != torch.float64:
        pylogger.warning(f"Gradient check in <{x.dtype}>, expect errors far above double-precision tolerances")

    stack.train()
    initial_state = stack.snapshot()

    logits = stack.forward(x)
    _, grad_logits = cross_entropy_loss(logits, labels)
    grad_input, grads = stack.backward(grad_logits)

    stack.hold_stop_gradient(True)

    def loss_at(tensor: Tensor, index: int, delta: float) -> float:
        stack.load_state_dict(initial_state)
        flat = tensor.view(-1)
        original = flat[index].item()
        flat[index] = original + delta
        value, _ = cross_entropy_loss(stack.forward(x), labels)
        flat[index] = original
        return value

    def numeric_gradient(tensor: Tensor) -> Tensor:
        numeric = torch.empty_like(tensor)
        flat = numeric.view(-1)
        for index in range(tensor.numel()):
            flat[index] = (loss_at(tensor, index, step) - loss_at(tensor, index, -step)) / (2 * step)
        return numeric

    report = GradCheckReport(tolerance=tolerance)
    try:
        x = x.clone()
        report.errors[INPUT_KEY] = relative_error(grad_input, numeric_gradient(x))

        for index, (layer_name, layer) in enumerate(zip(stack.layer_names, stack.layers)):
            for name, param in layer.named_parameters(prefix=stack.parameter_prefix(index)):
                error = relative_error(grads[name], numeric_gradient(param))
                report.errors[layer_name] = max(report.errors.get(layer_name, 0.0), error)
    finally:
        stack.hold_stop_gradient(False)
        stack.load_state_dict(initial_state)

    pylogger.info(f"Gradient check max relative error <{report.max_error:.3e}> (tolerance {tolerance:.0e})")
    return report
