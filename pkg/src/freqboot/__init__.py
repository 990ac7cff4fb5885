"""Non-contrastive self-supervised learning for time series with a TCN head
for slow structure and an MLP head for fast structure."""

from .augmentations import (
    AugmentationConfig,
    ViewPair,
    jitter,
    make_view_pair,
    permute_segments,
    rotate,
)
from .data import (
    SplitSpec,
    SyntheticSpec,
    TimeSeriesDataset,
    generate_synthetic,
    load_dataset,
    load_splits,
    save_dataset,
    split_dataset,
    subsample_labels,
)
from .estimator import FreqBootstrapEncoder, check_timeseries
from .evaluation import (
    EvalReport,
    compute_metrics,
    export_embeddings,
    finetune_semisupervised,
    linear_evaluate,
    run_supervised_baseline,
)
from .network import (
    DualNetwork,
    EncoderConfig,
    MLPHeadConfig,
    NetworkConfig,
    TCNHeadConfig,
    receptive_field,
)
from .objective import LossWeights, full_loss, normalized_regression_loss
from .trainer import TrainConfig, load_config, preset, pretrain, train_step

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig",
    "DualNetwork",
    "EncoderConfig",
    "EvalReport",
    "FreqBootstrapEncoder",
    "LossWeights",
    "MLPHeadConfig",
    "NetworkConfig",
    "SplitSpec",
    "SyntheticSpec",
    "TCNHeadConfig",
    "TimeSeriesDataset",
    "TrainConfig",
    "ViewPair",
    "check_timeseries",
    "compute_metrics",
    "export_embeddings",
    "finetune_semisupervised",
    "full_loss",
    "generate_synthetic",
    "jitter",
    "linear_evaluate",
    "load_config",
    "load_dataset",
    "load_splits",
    "make_view_pair",
    "normalized_regression_loss",
    "permute_segments",
    "preset",
    "pretrain",
    "receptive_field",
    "rotate",
    "run_supervised_baseline",
    "save_dataset",
    "split_dataset",
    "subsample_labels",
    "train_step",
]
