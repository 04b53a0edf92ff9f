import sys

if sys.version_info >= (3, 11):
    from enum import StrEnum
else:
    from backports.strenum import StrEnum


class NormKind(StrEnum):
    BN = "bn"
    BRN = "brn"
    GN = "gn"
    LN = "ln"
    IN = "in"
    SN = "sn"
    CN = "cn"
    CN_VARIANT = "cn_variant"


class MovingAverage(StrEnum):
    EMA = "ema"
    CMA = "cma"


class VariantOrder(StrEnum):
    GN_THEN_BN = "gn_then_bn"
    BN_THEN_GN = "bn_then_gn"


class Mode(StrEnum):
    TRAIN = "train"
    EVAL = "eval"


class Backbone(StrEnum):
    MLP_TOY = "mlp_toy"
    CNN_SMALL = "cnn_small"


class StreamKind(StrEnum):
    PMNIST = "pmnist"
    SPLIT_SYNTHETIC = "split_synthetic"


class StrategyKind(StrEnum):
    SINGLE = "single"
    ER = "er"
    DERPP = "derpp"


class MemoryPolicy(StrEnum):
    RING = "ring"
    RESERVOIR = "reservoir"


class EvalSetting(StrEnum):
    CLASS_IL = "class_il"
    TASK_IL = "task_il"
