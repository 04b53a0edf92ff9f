import json
from pathlib import Path

import pandas as pd
import pytest
from omegaconf import DictConfig, OmegaConf

from tests.conftest import with_overrides

from contnorm import runner
from contnorm.config import ConfigError
from contnorm.continual.oracle import NO_BATCH_DEPENDENT_LAYERS
from contnorm.runner import (
    CHECKPOINT_DIR,
    DRIFT_FILE,
    DRIFT_PLOT_FILE,
    RUNS_FILE,
    SUMMARY_FILE,
    compare_layers,
    run_experiment,
)
from contnorm.scripts.run_compare import COMPARE_FILE, layer_configs, layer_label
from contnorm.scripts.run_compare import run as run_compare

GOLDEN_DIR = Path(__file__).parent / "golden"


def golden_header(name: str) -> str:
    return (GOLDEN_DIR / f"{name}_header.csv").read_text().strip()


def golden_columns(name: str) -> list:
    return golden_header(name).split(",")


def header(path: Path) -> str:
    return path.read_text().splitlines()[0]


@pytest.fixture(scope="module")
def summary_keys() -> dict:
    with open(GOLDEN_DIR / "summary_keys.json") as f:
        return json.load(f)


def test_train_loop(run_trainings: Path) -> None:
    assert run_trainings
    assert (run_trainings / RUNS_FILE).exists()
    assert (run_trainings / SUMMARY_FILE).exists()


def test_runs_file(run_trainings: Path, cfg_all: DictConfig) -> None:
    runs = pd.read_csv(run_trainings / RUNS_FILE)
    n_tasks, seeds = cfg_all.nn.data.n_tasks, list(cfg_all.train.seeds)
    name = f"{cfg_all.train.strategy.kind}-{cfg_all.nn.model.norm.kind}"

    assert header(run_trainings / RUNS_FILE) == golden_header("runs")
    expected_methods = [name, name + "*"] if cfg_all.train.bn_star else [name]
    assert runs["method"].unique().tolist() == expected_methods
    assert len(runs) == len(expected_methods) * len(seeds) * n_tasks * (n_tasks + 1) // 2
    assert sorted(runs["seed"].unique().tolist()) == seeds
    assert (runs["eval_task"] <= runs["after_task"]).all()
    assert runs["accuracy"].between(0, 1).all()


def test_drift_file(run_trainings: Path, cfg_all: DictConfig) -> None:
    if not cfg_all.train.drift_tracking:
        assert not (run_trainings / DRIFT_FILE).exists()
        return

    drift = pd.read_csv(run_trainings / DRIFT_FILE)
    assert header(run_trainings / DRIFT_FILE) == golden_header("drift")
    assert len(drift) == len(cfg_all.train.seeds) * cfg_all.nn.data.n_tasks * 2
    assert sorted(drift["layer"].unique().tolist()) == [1, 2]
    assert (drift[["delta_mu", "delta_var"]] >= 0).all().all()
    assert (run_trainings / DRIFT_PLOT_FILE).exists() == cfg_all.train.plot_drift


def test_summary_file(run_trainings: Path, cfg_all: DictConfig, summary_keys: dict) -> None:
    with open(run_trainings / SUMMARY_FILE) as f:
        summary = json.load(f)

    assert list(summary) == summary_keys["summary"]
    for entry in summary["methods"]:
        assert list(entry) == summary_keys["method_with_drift" if "drift" in entry else "method"]
        for metric in ("acc", "fm", "la"):
            assert list(entry[metric]) == summary_keys["mean_std"]
        for layer in entry.get("drift", []):
            assert list(layer) == summary_keys["drift_layer"]
            assert list(layer["delta_mu"]) == list(layer["delta_var"]) == summary_keys["mean_std"]

    assert summary["warnings"] == []
    method = summary["methods"][0]
    assert method["seeds"] == list(cfg_all.train.seeds)
    assert 0 <= method["acc"]["mean"] <= 1
    assert method["acc"]["std"] is not None
    assert set(method["fm"]) == {"mean", "std"}
    assert "seconds" not in json.dumps(summary)

    if cfg_all.train.drift_tracking:
        assert [layer["layer"] for layer in method["drift"]] == [1, 2]
        assert "drift" not in summary["methods"][1]
    else:
        assert "drift" not in method


def test_runs_are_reproducible(cfg_simple_train: DictConfig, tmp_path: Path) -> None:
    outputs = []
    for name in ("first", "second"):
        cfg = with_overrides(cfg_simple_train, f"core.output_dir={tmp_path / name}", "train.seeds=[4]")
        outputs.append(run_experiment(cfg))

    for file in (RUNS_FILE, SUMMARY_FILE):
        assert (outputs[0] / file).read_bytes() == (outputs[1] / file).read_bytes()


def test_split_synthetic_cnn_run(cfg_simple_train: DictConfig, tmp_path: Path) -> None:
    cfg = with_overrides(
        cfg_simple_train,
        f"core.output_dir={tmp_path}",
        "nn.data.stream=split_synthetic",
        "nn.data.n_tasks=2",
        "nn.data.train_per_task=20",
        "nn.data.test_per_task=10",
        "nn.model.backbone=cnn_small",
        "nn.model.channels=4",
        "nn.model.norm.kind=cn",
        "nn.model.norm.groups=2",
        "train.strategy.kind=er",
        "train.memory.per_task_quota=10",
        "train.strategy.replay_batch_size=5",
        "train.eval_setting=task_il",
        "train.seeds=[0]",
    )
    runs = pd.read_csv(run_experiment(cfg) / RUNS_FILE)

    assert runs["method"].unique().tolist() == ["er-cn"]
    assert len(runs) == 3


def test_gn_only_run_warns(cfg_simple_train: DictConfig, tmp_path: Path) -> None:
    cfg = with_overrides(
        cfg_simple_train,
        f"core.output_dir={tmp_path}",
        "nn.model.norm.kind=gn",
        "nn.model.norm.groups=4",
        "train.bn_star=True",
        "train.drift_tracking=True",
    )
    output_dir = run_experiment(cfg)

    with open(output_dir / SUMMARY_FILE) as f:
        summary = json.load(f)
    assert summary["warnings"] == [f"single-gn: {NO_BATCH_DEPENDENT_LAYERS}"]
    assert [method["method"] for method in summary["methods"]] == ["single-gn"]
    assert not (output_dir / DRIFT_FILE).exists()


def test_sweep_methods(cfg_simple_train: DictConfig, tmp_path: Path) -> None:
    cfg = OmegaConf.merge(
        with_overrides(cfg_simple_train, f"core.output_dir={tmp_path}", "train.seeds=[0]"),
        {
            "sweep": [
                {"name": "er-ema", "overrides": ["train.strategy.kind=er"]},
                {"name": "er-cma", "overrides": ["train.strategy.kind=er", "nn.model.norm.moving_average=cma"]},
            ]
        },
    )
    runs = pd.read_csv(run_experiment(cfg) / RUNS_FILE)
    assert runs["method"].unique().tolist() == ["er-ema", "er-cma"]


def test_partial_outputs_are_removed(cfg_simple_train: DictConfig, tmp_path: Path, monkeypatch) -> None:
    def broken_summary(runs):
        raise RuntimeError("summary failed")

    monkeypatch.setattr(runner, "summarize_runs", broken_summary)
    cfg = with_overrides(cfg_simple_train, f"core.output_dir={tmp_path}", "train.seeds=[0]", "train.checkpoint=True")

    with pytest.raises(RuntimeError):
        run_experiment(cfg)
    assert not (tmp_path / RUNS_FILE).exists()
    assert not (tmp_path / CHECKPOINT_DIR).exists()


def test_invalid_experiment_writes_nothing(cfg_simple_train: DictConfig, tmp_path: Path) -> None:
    cfg = with_overrides(cfg_simple_train, f"core.output_dir={tmp_path / 'out'}", "nn.model.norm.groups=3")
    cfg = with_overrides(cfg, "nn.model.norm.kind=cn")

    with pytest.raises(ConfigError):
        run_experiment(cfg)
    assert not (tmp_path / "out").exists()


#
# Layer comparison
#
@pytest.fixture
def cfg_compare(cfg_simple_train: DictConfig, tmp_path: Path) -> DictConfig:
    cfg = with_overrides(cfg_simple_train, f"core.output_dir={tmp_path}", "train.seeds=[0,1]")
    return OmegaConf.merge(cfg, {"compare": {"norms": [{"kind": "bn"}, {"kind": "cn", "groups": 4}]}})


def test_layer_label():
    assert layer_label({"kind": "bn"}) == "bn"
    assert layer_label({"kind": "gn", "groups": 4}) == "gn(groups=4)"


def test_layer_configs(cfg_compare: DictConfig):
    configs = layer_configs(cfg_compare)

    assert [label for label, _ in configs] == ["bn", "cn(groups=4)"]
    assert configs[1][1].nn.model.norm.kind == "cn"
    assert configs[1][1].nn.model.norm.groups == 4
    assert all(cfg.compare.norms == [] for _, cfg in configs)


def test_layer_configs_need_norms(cfg_simple_train: DictConfig):
    with pytest.raises(ConfigError):
        layer_configs(cfg_simple_train)


def test_compare_layers(cfg_compare: DictConfig):
    table = compare_layers(layer_configs(cfg_compare))

    assert list(table.columns) == golden_columns("compare")
    assert table["layer"].tolist() == ["bn", "cn(groups=4)"]
    assert table["method"].tolist() == ["single-bn", "single-cn"]
    assert table.loc[0, "time_vs_bn"] == pytest.approx(1.0)
    assert (table["seconds"] > 0).all()
    assert table["acc_std"].notna().all()


def test_compare_layers_with_different_settings(cfg_compare: DictConfig):
    (bn_label, bn_cfg), (cn_label, cn_cfg) = layer_configs(cfg_compare)
    with pytest.raises(ConfigError):
        compare_layers([(bn_label, bn_cfg), (cn_label, with_overrides(cn_cfg, "train.lr=0.1"))])
    with pytest.raises(ConfigError):
        compare_layers([])


def test_compare_script(cfg_compare: DictConfig, tmp_path: Path):
    output_dir = run_compare(cfg_compare)

    table = pd.read_csv(output_dir / COMPARE_FILE)
    assert output_dir == tmp_path
    assert header(output_dir / COMPARE_FILE) == golden_header("compare")
    assert len(table) == 2
