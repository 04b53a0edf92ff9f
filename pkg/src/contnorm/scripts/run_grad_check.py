import logging
import sys
from typing import List, Optional

import hydra
import omegaconf
import torch
from omegaconf import DictConfig
from rich.console import Console
from rich.table import Table

from nn_core.common import PROJECT_ROOT

# Force the execution of __init__.py if this file is executed directly.
import contnorm  # noqa
from contnorm.config import NO_NORM
from contnorm.modules.grad_check import GradCheckReport, grad_check
from contnorm.modules.stack import build_backbone
from contnorm.numerics import RngStreams
from contnorm.utils import Backbone, NormKind

pylogger = logging.getLogger(__name__)

NUM_CLASSES = 3


def norm_fields(kind: str, groups: int) -> Optional[dict]:
    if kind == NO_NORM:
        return None
    fields = {"kind": kind, "groups": groups}
    if kind == NormKind.CN_VARIANT:
        fields.update({"variant_order": "bn_then_gn", "tied_affine": True})
    return fields


def check_layer(cfg: DictConfig, kind: str, backbone: Backbone) -> GradCheckReport:
    params = cfg.grad_check
    rngs = RngStreams(params.seed)
    input_shape = (1, params.input_size, params.input_size)
    stack = build_backbone(
        backbone,
        input_shape=input_shape,
        num_classes=NUM_CLASSES,
        norm=norm_fields(kind, params.groups),
        generator=rngs.get(RngStreams.INIT),
        dtype=torch.float64,
        hidden_dim=params.hidden_dim,
        channels=params.channels,
    )

    data_rng = rngs.get(RngStreams.SYNTHETIC)
    x = torch.randn((params.batch_size,) + input_shape, generator=data_rng, dtype=torch.float64)
    labels = torch.randint(0, NUM_CLASSES, (params.batch_size,), generator=data_rng)

    tolerance = params.tolerance if backbone == Backbone.MLP_TOY else params.cnn_tolerance
    return grad_check(stack, x, labels, tolerance=tolerance)


def run(cfg: DictConfig) -> bool:
    kinds: List[str] = [cfg.grad_check.layer] if cfg.grad_check.layer else [k.value for k in NormKind]

    table = Table(title="Backward vs central finite differences")
    for column in ("layer", "backbone", "max rel. error", "tolerance", "status"):
        table.add_column(column)

    passed = True
    for kind in kinds:
        for backbone in Backbone:
            report = check_layer(cfg, kind, backbone)
            passed &= report.passed
            status = "[green]ok[/green]" if report.passed else "[red]FAILED[/red]"
            table.add_row(kind, backbone.value, f"{report.max_error:.2e}", f"{report.tolerance:.0e}", status)

    Console().print(table)
    return passed


@hydra.main(config_path=str(PROJECT_ROOT / "conf"), config_name="grad_check")
def main(cfg: omegaconf.DictConfig):
    if not run(cfg):
        pylogger.error("Gradient check failed")
        sys.exit(1)


if __name__ == "__main__":
    main()
