import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from hydra.core.config_store import ConfigStore
from omegaconf import DictConfig, OmegaConf

from nn_core.common import PROJECT_ROOT  # noqa: F401 exports PROJECT_ROOT for the interpolations below

from contnorm.utils import (
    Backbone,
    EvalSetting,
    MemoryPolicy,
    MovingAverage,
    NormKind,
    StrategyKind,
    StreamKind,
    VariantOrder,
)

pylogger = logging.getLogger(__name__)

NO_NORM = "none"
DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    pass


@dataclass
class CoreConfig:
    project_name: str = "contnorm"
    storage_dir: str = "${oc.env:PROJECT_ROOT}/storage"
    version: str = "0.0.1"
    run_name: str = "default"
    output_dir: str = "${core.storage_dir}/${core.run_name}"
    tags: List[str] = field(default_factory=list)


@dataclass
class DataConfig:
    stream: str = StreamKind.PMNIST.value
    dataset_dir: str = "${oc.env:PROJECT_ROOT}/data/MNIST"
    n_tasks: int = 5
    train_per_task: int = 2000
    test_per_task: Optional[int] = None
    identity_first_task: bool = False
    # split_synthetic only
    image_size: int = 8
    blob_sigma: float = 1.5
    jitter: float = 0.75
    noise: float = 0.1


@dataclass
class NormConfig:
    kind: str = NormKind.BN.value
    groups: int = 32
    epsilon: float = 1e-5
    eta: float = 0.1
    moving_average: str = MovingAverage.EMA.value
    brn_rmax: float = 3.0
    brn_dmax: float = 5.0
    variant_order: str = VariantOrder.GN_THEN_BN.value
    tied_affine: bool = False


@dataclass
class ModelConfig:
    backbone: str = Backbone.MLP_TOY.value
    hidden_dim: int = 100
    channels: int = 8
    norm: NormConfig = field(default_factory=NormConfig)


@dataclass
class NNConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class StrategySchema:
    kind: str = StrategyKind.SINGLE.value
    replay_batch_size: int = 10
    der_alpha: float = 0.5
    der_beta: float = 0.5


@dataclass
class MemorySchema:
    policy: str = MemoryPolicy.RING.value
    capacity: int = 250
    per_task_quota: int = 50


@dataclass
class TrainConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    deterministic: bool = True
    dtype: str = "float32"
    lr: float = 0.03
    batch_size: int = 10
    eval_batch_size: int = 1000
    eval_setting: str = EvalSetting.CLASS_IL.value
    strategy: StrategySchema = field(default_factory=StrategySchema)
    memory: MemorySchema = field(default_factory=MemorySchema)
    bn_star: bool = False
    drift_tracking: bool = False
    checkpoint: bool = False
    restore_from: Optional[str] = None
    plot_drift: bool = False
    callbacks: List[Any] = field(default_factory=list)


@dataclass
class SweepEntry:
    """One method of an experiment: a name and dotted-key overrides of the base config (`train.strategy.kind=er`)."""

    name: str = "???"
    overrides: List[str] = field(default_factory=list)


@dataclass
class CompareConfig:
    """Normalization layers to compare; each entry overrides fields of `nn.model.norm`."""

    norms: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class GradCheckConfig:
    layer: Optional[str] = None
    tolerance: float = 1e-5
    cnn_tolerance: float = 1e-4
    batch_size: int = 4
    input_size: int = 3
    hidden_dim: int = 8
    channels: int = 4
    groups: int = 2
    seed: int = 0


@dataclass
class ExperimentConfig:
    core: CoreConfig = field(default_factory=CoreConfig)
    nn: NNConfig = field(default_factory=NNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: List[SweepEntry] = field(default_factory=list)
    compare: CompareConfig = field(default_factory=CompareConfig)
    grad_check: GradCheckConfig = field(default_factory=GradCheckConfig)


ConfigStore.instance().store(name="experiment_schema", node=ExperimentConfig)


def _fail(message: str) -> None:
    pylogger.error(message)
    raise ConfigError(message)


def _check_choice(value: Any, choices: Sequence[str], key: str) -> None:
    if str(value) not in choices:
        _fail(f"<{key}> must be one of {list(choices)}, got <{value}>")


def load_experiment_config(path: Union[str, Path], overrides: Sequence[str] = ()) -> DictConfig:
    """Merge a standalone YAML file and dotted overrides onto the schema; unknown keys raise."""
    cfg = OmegaConf.merge(OmegaConf.structured(ExperimentConfig), OmegaConf.load(path))
    if overrides:
        cfg = OmegaConf.merge(cfg, OmegaConf.from_dotlist(list(overrides)))
    OmegaConf.set_struct(cfg, True)
    return cfg


def norm_width(model: Any) -> int:
    return model.hidden_dim if model.backbone == Backbone.MLP_TOY else model.channels


def validate_method(cfg: DictConfig, name: str = "base") -> None:
    data, model, train = cfg.nn.data, cfg.nn.model, cfg.train
    norm = model.norm

    _check_choice(data.stream, [k.value for k in StreamKind], "nn.data.stream")
    _check_choice(model.backbone, [b.value for b in Backbone], "nn.model.backbone")
    _check_choice(norm.kind, [k.value for k in NormKind] + [NO_NORM], "nn.model.norm.kind")
    _check_choice(norm.moving_average, [m.value for m in MovingAverage], "nn.model.norm.moving_average")
    _check_choice(norm.variant_order, [v.value for v in VariantOrder], "nn.model.norm.variant_order")
    _check_choice(train.strategy.kind, [k.value for k in StrategyKind], "train.strategy.kind")
    _check_choice(train.memory.policy, [p.value for p in MemoryPolicy], "train.memory.policy")
    _check_choice(train.eval_setting, [e.value for e in EvalSetting], "train.eval_setting")
    _check_choice(train.dtype, DTYPES, "train.dtype")

    if data.n_tasks < 1 or data.train_per_task < 1:
        _fail(f"<{name}>: need at least one task and one training sample per task")
    if data.stream == StreamKind.PMNIST and model.backbone != Backbone.MLP_TOY:
        pylogger.warning(f"<{name}>: the convolutional backbone on pMNIST runs on 28x28 permuted images")

    if norm.kind in (NormKind.GN, NormKind.CN, NormKind.CN_VARIANT):
        width = norm_width(model)
        if norm.groups < 1 or width % norm.groups != 0:
            _fail(f"<{name}>: {width} channels cannot be split into <{norm.groups}> groups")
    if norm.epsilon <= 0 or not 0 < norm.eta <= 1:
        _fail(f"<{name}>: epsilon must be positive and eta in (0, 1], got {norm.epsilon}, {norm.eta}")
    if norm.brn_rmax < 1 or norm.brn_dmax < 0:
        _fail(f"<{name}>: BRN needs r_max >= 1 and d_max >= 0")

    if train.lr <= 0 or train.batch_size < 1 or train.eval_batch_size < 1:
        _fail(f"<{name}>: lr must be positive and batch sizes at least 1")
    if not train.seeds:
        _fail(f"<{name}>: no seeds to run")

    memory, strategy = train.memory, train.strategy
    replays = strategy.kind != StrategyKind.SINGLE
    if replays and memory.capacity == 0:
        _fail(f"<{name}>: strategy <{strategy.kind}> needs a memory, capacity is 0")
    if replays and strategy.replay_batch_size > memory.capacity:
        _fail(f"<{name}>: replay batch {strategy.replay_batch_size} exceeds memory capacity {memory.capacity}")
    if replays and memory.policy == MemoryPolicy.RING and memory.capacity < data.n_tasks * memory.per_task_quota:
        _fail(
            f"<{name}>: ring memory of capacity {memory.capacity} cannot hold "
            f"{data.n_tasks} tasks x {memory.per_task_quota} items"
        )
    if strategy.der_alpha < 0 or strategy.der_beta < 0:
        _fail(f"<{name}>: DER++ weights must be non negative")

    if train.eval_setting == EvalSetting.TASK_IL and data.stream == StreamKind.PMNIST:
        pylogger.warning(f"<{name}>: task-incremental evaluation is the same as class-incremental on pMNIST")


def method_configs(cfg: DictConfig) -> List[Tuple[str, DictConfig]]:
    """One (name, config) pair per sweep entry, or a single `<strategy>-<norm>` method without a sweep."""
    base = OmegaConf.merge(cfg, {"sweep": []})

    if not cfg.sweep:
        return [(f"{cfg.train.strategy.kind}-{cfg.nn.model.norm.kind}", base)]

    methods = []
    for entry in cfg.sweep:
        try:
            method = OmegaConf.merge(base, OmegaConf.from_dotlist(list(entry.overrides)))
        except Exception as e:
            message = f"Sweep entry <{entry.name}> has invalid overrides {list(entry.overrides)}"
            pylogger.error(message)
            raise ConfigError(message) from e
        methods.append((entry.name, method))
    return methods


def validate_experiment(cfg: DictConfig) -> None:
    """Check every cross-field precondition of the experiment and of each of its methods."""
    names = [entry.name for entry in cfg.sweep]
    if len(names) != len(set(names)):
        _fail(f"Sweep method names must be unique, got {names}")
    if any(name.endswith("*") for name in names):
        _fail("Method names ending with '*' are reserved for the BN* rows")

    for name, method in method_configs(cfg):
        validate_method(method, name)

    seeds = list(cfg.train.seeds)
    if len(seeds) != len(set(seeds)):
        _fail(f"Seeds must be distinct, got {seeds}")
