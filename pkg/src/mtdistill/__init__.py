"""Multitask self-distillation training kit for accelerometer windows.

A small numpy-based stack: a reverse-mode autodiff tensor engine, CNN
building blocks, a dual-head time-series network, distillation losses
with a smoothed (parameter-averaged) teacher, five training procedures,
a windowing data pipeline and an evaluation/statistics suite.
"""

from .data import (
    DataSplits,
    RawRecording,
    SplitSpec,
    WindowedDataset,
    adapt_public_dataset,
    assemble,
    ingest_csv,
    load_windows,
    save_windows,
    split_and_fold,
    synth_generate,
    window_slide,
    windows_from_csv,
)
from .distill import (
    DistillConfig,
    born_again_total,
    cross_entropy,
    ema_update,
    kd_loss,
    make_teacher,
    multitask_ce_loss,
    smooth_total,
    softened_probs,
)
from .errors import ConfigError, ContractError, DataError, MTDistillError, ShapeError
from .metrics import ConfusionMatrix, MetricsReport, confusion, paired_t_test, report
from .models import (
    DualLogits,
    MTLNet,
    MTLNetConfig,
    SingleHeadNet,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .tensor import GradTape, Tensor, backward, no_grad
from .training import (
    METHODS,
    Adam,
    RunResult,
    TrainConfig,
    run_training,
    seeded_rng,
    train_born_again,
    train_multitask,
    train_sd_dropout,
    train_singletask,
    train_smooth_distill,
)

__version__ = "0.1.0"
