import logging
from pathlib import Path
from typing import List, Tuple

import hydra
import omegaconf
import pandas as pd
from omegaconf import DictConfig, OmegaConf
from rich.console import Console
from rich.table import Table

from nn_core.common import PROJECT_ROOT

# Force the execution of __init__.py if this file is executed directly.
import contnorm  # noqa
from contnorm.config import ConfigError
from contnorm.runner import compare_layers

pylogger = logging.getLogger(__name__)

COMPARE_FILE = "compare.csv"


def layer_label(norm: dict) -> str:
    extras = ",".join(f"{key}={value}" for key, value in norm.items() if key != "kind")
    return f"{norm['kind']}({extras})" if extras else str(norm["kind"])


def layer_configs(cfg: DictConfig) -> List[Tuple[str, DictConfig]]:
    """One config per entry of `compare.norms`, each writing into its own subdirectory of the output dir."""
    if not cfg.compare.norms:
        message = "<compare.norms> is empty, nothing to compare"
        pylogger.error(message)
        raise ConfigError(message)

    configs = []
    for norm in cfg.compare.norms:
        norm = OmegaConf.to_container(norm, resolve=True)
        label = layer_label(norm)
        layer_cfg = OmegaConf.merge(cfg, {"nn": {"model": {"norm": norm}}, "compare": {"norms": []}})
        configs.append((label, layer_cfg))
    return configs


def render(table: pd.DataFrame) -> None:
    rich_table = Table(title="Normalization layers")
    for column in table.columns:
        rich_table.add_column(column, justify="left" if column in ("layer", "method") else "right")
    for row in table.itertuples(index=False):
        rich_table.add_row(*[value if isinstance(value, str) else f"{value:.4f}" for value in row])
    Console().print(rich_table)


def run(cfg: DictConfig) -> Path:
    table = compare_layers(layer_configs(cfg))
    render(table)

    output_dir = Path(cfg.core.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(output_dir / COMPARE_FILE, index=False, float_format="%.6f")
    pylogger.info(f"Comparison written to <{output_dir / COMPARE_FILE}>")
    return output_dir


@hydra.main(config_path=str(PROJECT_ROOT / "conf"), config_name="compare")
def main(cfg: omegaconf.DictConfig):
    run(cfg)


if __name__ == "__main__":
    main()
