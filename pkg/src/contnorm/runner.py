import functools
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch
from omegaconf import DictConfig, OmegaConf

from contnorm.callbacks import build_callbacks
from contnorm.config import ConfigError, method_configs, validate_experiment
from contnorm.continual.strategies import StrategyConfig, build_strategy
from contnorm.continual.trainer import OnlineResult, train_online
from contnorm.data.io_utils import ImageDataset, load_mnist
from contnorm.data.memory import EpisodicMemory
from contnorm.data.stream import TaskStream, build_pmnist_stream, build_split_synthetic_stream
from contnorm.metrics import AccuracyMatrix, acc, fm, la, mean_std
from contnorm.modules.optim import SgdConfig
from contnorm.modules.stack import LayerStack, build_backbone
from contnorm.numerics import RngStreams
from contnorm.plotting import plot_drift
from contnorm.utils import StreamKind

pylogger = logging.getLogger(__name__)

RUNS_FILE = "runs.csv"
DRIFT_FILE = "drift.csv"
SUMMARY_FILE = "summary.json"
DRIFT_PLOT_FILE = "drift.html"
CHECKPOINT_DIR = "checkpoints"

RUNS_COLUMNS = ["method", "seed", "after_task", "eval_task", "accuracy"]
DRIFT_COLUMNS = ["method", "seed", "after_task", "layer", "delta_mu", "delta_var"]
COMPARE_COLUMNS = [
    "layer",
    "method",
    "acc_mean",
    "acc_std",
    "fm_mean",
    "fm_std",
    "la_mean",
    "la_std",
    "seconds",
    "time_vs_bn",
]

BN_STAR_SUFFIX = "*"


@dataclass
class MethodRuns:
    """All seeds of one method, in seed order."""

    name: str
    cfg: DictConfig
    results: List[Tuple[int, OnlineResult]] = field(default_factory=list)
    seconds: float = 0.0


@functools.lru_cache(maxsize=2)
def cached_mnist(dataset_dir: str) -> Tuple[ImageDataset, ImageDataset]:
    return load_mnist(dataset_dir)


def build_stream(data_cfg: DictConfig, seed: int) -> TaskStream:
    if data_cfg.stream == StreamKind.PMNIST:
        train_set, test_set = cached_mnist(str(data_cfg.dataset_dir))
        return build_pmnist_stream(
            train_set,
            test_set,
            n_tasks=data_cfg.n_tasks,
            train_per_task=data_cfg.train_per_task,
            seed=seed,
            test_per_task=data_cfg.test_per_task,
            identity_first_task=data_cfg.identity_first_task,
        )

    return build_split_synthetic_stream(
        n_tasks=data_cfg.n_tasks,
        train_per_task=data_cfg.train_per_task,
        test_per_task=data_cfg.test_per_task or data_cfg.train_per_task,
        seed=seed,
        image_size=data_cfg.image_size,
        blob_sigma=data_cfg.blob_sigma,
        jitter=data_cfg.jitter,
        noise=data_cfg.noise,
    )


def build_stack(cfg: DictConfig, input_shape: Sequence[int], num_classes: int, rngs: RngStreams) -> LayerStack:
    model = cfg.nn.model
    return build_backbone(
        backbone=model.backbone,
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        norm=OmegaConf.to_container(model.norm, resolve=True),
        generator=rngs.get(RngStreams.INIT),
        dtype=getattr(torch, cfg.train.dtype),
        hidden_dim=model.hidden_dim,
        channels=model.channels,
    )


def save_checkpoint(path: Path, cfg: DictConfig, seed: int, stream: TaskStream, stack: LayerStack) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "cfg": OmegaConf.to_container(cfg, resolve=True),
            "seed": seed,
            "input_shape": list(stream.input_shape),
            "num_classes": stream.num_classes,
            "state_dict": stack.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: Path) -> Tuple[DictConfig, int, LayerStack]:
    """Rebuild the stack saved by a run, with its parameters and running statistics."""
    payload = torch.load(path)
    cfg = OmegaConf.create(payload["cfg"])
    seed = payload["seed"]

    stack = build_stack(cfg, payload["input_shape"], payload["num_classes"], RngStreams(seed))
    stack.load_state_dict(payload["state_dict"])
    pylogger.info(f"Restored <{cfg.nn.model.backbone}> stack of seed <{seed}> from <{path}>")
    return cfg, seed, stack


def run_seed(cfg: DictConfig, seed: int) -> Tuple[TaskStream, OnlineResult]:
    """Train and evaluate one method for one seed; everything random derives from `seed`."""
    torch.use_deterministic_algorithms(cfg.train.deterministic)
    rngs = RngStreams(seed)

    pylogger.info(f"Building the <{cfg.nn.data.stream}> stream for seed <{seed}>")
    stream = build_stream(cfg.nn.data, seed)

    pylogger.info(f"Building <{cfg.nn.model.backbone}> with <{cfg.nn.model.norm.kind}> normalization")
    stack = build_stack(cfg, stream.input_shape, stream.num_classes, rngs)
    if cfg.train.restore_from is not None:
        _, _, restored = load_checkpoint(Path(cfg.train.restore_from))
        stack.load_state_dict(restored.state_dict())

    strategy = build_strategy(StrategyConfig(**OmegaConf.to_container(cfg.train.strategy, resolve=True)))
    memory = EpisodicMemory(
        capacity=cfg.train.memory.capacity,
        policy=cfg.train.memory.policy,
        per_task_quota=cfg.train.memory.per_task_quota,
    )

    result = train_online(
        stream,
        stack,
        strategy,
        memory,
        SgdConfig(learning_rate=cfg.train.lr, batch_size=cfg.train.batch_size),
        rngs,
        bn_star=cfg.train.bn_star,
        drift_tracking=cfg.train.drift_tracking,
        eval_setting=cfg.train.eval_setting,
        eval_batch_size=cfg.train.eval_batch_size,
        callbacks=build_callbacks(cfg.train.callbacks),
    )
    return stream, result


def run_methods(cfg: DictConfig, checkpoint_dir: Optional[Path] = None) -> List[MethodRuns]:
    runs = []
    for name, method_cfg in method_configs(cfg):
        method = MethodRuns(name=name, cfg=method_cfg)
        start = time.perf_counter()
        for seed in method_cfg.train.seeds:
            pylogger.info(f"Running method <{name}> with seed <{seed}>")
            stream, result = run_seed(method_cfg, seed)
            method.results.append((seed, result))
            if checkpoint_dir is not None and method_cfg.train.checkpoint:
                save_checkpoint(checkpoint_dir / f"{name}_seed{seed}.pt", method_cfg, seed, stream, result.stack)
        method.seconds = time.perf_counter() - start
        runs.append(method)
    return runs


def _matrices(method: MethodRuns) -> List[Tuple[str, List[Tuple[int, AccuracyMatrix]]]]:
    """(row name, per-seed matrices) for the method and, when computed, for its BN* oracle."""
    rows = [(method.name, [(seed, result.accuracy) for seed, result in method.results])]
    stars = [(seed, result.bn_star_accuracy) for seed, result in method.results if result.bn_star_accuracy is not None]
    if stars:
        rows.append((method.name + BN_STAR_SUFFIX, stars))
    return rows


def runs_frame(runs: Sequence[MethodRuns]) -> pd.DataFrame:
    records = [
        (name, seed, after_task, eval_task, accuracy)
        for method in runs
        for name, matrices in _matrices(method)
        for seed, matrix in matrices
        for after_task, eval_task, accuracy in matrix.entries()
    ]
    return pd.DataFrame.from_records(records, columns=RUNS_COLUMNS)


def drift_frame(runs: Sequence[MethodRuns]) -> pd.DataFrame:
    records = [
        (method.name, seed, record.after_task, layer.layer, layer.delta_mu, layer.delta_var)
        for method in runs
        for seed, result in method.results
        for record in result.drift
        for layer in record.layers
    ]
    return pd.DataFrame.from_records(records, columns=DRIFT_COLUMNS)


def _drift_summary(method: MethodRuns) -> Optional[List[Dict[str, Any]]]:
    finals = [result.drift[-1] for _, result in method.results if result.drift]
    if not finals:
        return None
    return [
        {
            "layer": k,
            "delta_mu": mean_std([record[k].delta_mu for record in finals]),
            "delta_var": mean_std([record[k].delta_var for record in finals]),
        }
        for k in range(1, len(finals[0].layers) + 1)
    ]


def summarize_runs(runs: Sequence[MethodRuns]) -> Dict[str, Any]:
    methods = []
    warnings: List[str] = []
    for method in runs:
        for name, matrices in _matrices(method):
            forgetting = [fm(matrix) for _, matrix in matrices]
            entry: Dict[str, Any] = {
                "method": name,
                "seeds": [seed for seed, _ in matrices],
                "acc": mean_std([acc(matrix) for _, matrix in matrices]),
                "fm": None if any(value is None for value in forgetting) else mean_std(forgetting),
                "la": mean_std([la(matrix) for _, matrix in matrices]),
            }
            drift = _drift_summary(method) if name == method.name else None
            if drift is not None:
                entry["drift"] = drift
            methods.append(entry)

        for _, result in method.results:
            for warning in result.warnings:
                message = f"{method.name}: {warning}"
                if message not in warnings:
                    warnings.append(message)

    return {"methods": methods, "warnings": warnings}


def remove_outputs(output_dir: Path) -> None:
    for name in (RUNS_FILE, DRIFT_FILE, SUMMARY_FILE, DRIFT_PLOT_FILE):
        (output_dir / name).unlink(missing_ok=True)
    shutil.rmtree(output_dir / CHECKPOINT_DIR, ignore_errors=True)


def run_experiment(cfg: DictConfig) -> Path:
    """Run every method of the experiment over every seed and write the result files.

    :param cfg: experiment configuration, as composed by Hydra from /conf
    :return the output directory
    """
    validate_experiment(cfg)
    output_dir = Path(cfg.core.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    try:
        runs = run_methods(cfg, checkpoint_dir=output_dir / CHECKPOINT_DIR)

        runs_frame(runs).to_csv(output_dir / RUNS_FILE, index=False, float_format="%.6f")

        drift = drift_frame(runs)
        if not drift.empty:
            drift.to_csv(output_dir / DRIFT_FILE, index=False, float_format="%.6f")
            if cfg.train.plot_drift:
                plot_drift(drift, output_dir / DRIFT_PLOT_FILE)

        with open(output_dir / SUMMARY_FILE, "w") as f:
            json.dump(summarize_runs(runs), f, indent=2)
    except BaseException:
        pylogger.error(f"Run failed, removing partial outputs from <{output_dir}>")
        remove_outputs(output_dir)
        raise

    pylogger.info(f"Results written to <{output_dir}>")
    return output_dir


def _comparable(cfg: DictConfig) -> Dict[str, Any]:
    container = OmegaConf.to_container(cfg, resolve=False)
    container["nn"]["model"].pop("norm")
    container["core"].pop("output_dir")
    container["core"].pop("run_name")
    return container


def compare_layers(configs: Sequence[Tuple[str, DictConfig]]) -> pd.DataFrame:
    """Run the same experiment with different normalization layers and merge the metrics in one table.

    :param configs: (layer label, config) pairs differing only in `nn.model.norm`
    :return one row per (layer, method) with the metrics and the wall-clock seconds of the layer's runs;
        time_vs_bn is relative to the layer labelled `bn`, when present
    """
    if not configs:
        pylogger.error("No layer configurations to compare")
        raise ConfigError("No layer configurations to compare")

    reference = _comparable(configs[0][1])
    for label, cfg in configs[1:]:
        if _comparable(cfg) != reference:
            message = f"Config of <{label}> differs from <{configs[0][0]}> beyond the normalization layer"
            pylogger.error(message)
            raise ConfigError(message)

    rows = []
    for label, cfg in configs:
        validate_experiment(cfg)
        pylogger.info(f"Comparing layer <{label}>")
        runs = run_methods(cfg)
        seconds = sum(method.seconds for method in runs)
        for entry in summarize_runs(runs)["methods"]:
            forgetting = entry["fm"] or {"mean": None, "std": None}
            rows.append(
                {
                    "layer": label,
                    "method": entry["method"],
                    "acc_mean": entry["acc"]["mean"],
                    "acc_std": entry["acc"]["std"],
                    "fm_mean": forgetting["mean"],
                    "fm_std": forgetting["std"],
                    "la_mean": entry["la"]["mean"],
                    "la_std": entry["la"]["std"],
                    "seconds": seconds,
                }
            )

    table = pd.DataFrame(rows, columns=COMPARE_COLUMNS[:-1])
    bn_seconds = table.loc[table["layer"] == "bn", "seconds"]
    table["time_vs_bn"] = table["seconds"] / bn_seconds.iloc[0] if not bn_seconds.empty else float("nan")
    return table[COMPARE_COLUMNS]

