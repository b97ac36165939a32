"""Episodic meta fine-tuning with a GNN metric, on a from-scratch tensor core.

The package trains a small convolutional feature extractor and a graph
neural network end to end on few-shot episodes, meta fine-tunes them with
a first-order rule that simulates test-time adaptation during training,
and evaluates test-time fine-tuning variants (with support-set
augmentation and a two-model softmax ensemble) on a synthetic
cross-domain benchmark.
"""

__version__ = "0.1.0"

from .adapt import (
    AugmentationPolicy,
    AugmentedSupport,
    ModelScores,
    augment_support,
    baseline_finetune_predict,
    ensemble_predict,
    gnn_predict,
)
from .backbone import BackboneConfig, FeatureExtractor, merge_params, split_params
from .checkpoint import load_checkpoint, save_checkpoint
from .episodes import (
    DOMAINS,
    Dataset,
    Episode,
    EpisodeSpec,
    center_crop_resize,
    generate_synthetic_domains,
    load_image_folder,
    sample_episode,
    synthetic_domain,
    two_class_task,
)
from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DimensionError,
    MetafewError,
)
from .gnn import GnnConfig, GnnMetric, GraphSignal, average_support_pairs
from .meta import (
    InnerLoopConfig,
    MetaModel,
    MetaState,
    inner_finetune,
    load_model,
    meta_step,
    save_model,
    train_meta,
)
from .optim import Adam, OptimizerState, Sgd, adam_step, sgd_step
from .tensor import Tape, Tensor

__all__ = [
    "AugmentationPolicy",
    "AugmentedSupport",
    "Adam",
    "BackboneConfig",
    "CapacityError",
    "ConfigError",
    "ContractError",
    "DOMAINS",
    "Dataset",
    "DimensionError",
    "Episode",
    "EpisodeSpec",
    "FeatureExtractor",
    "GnnConfig",
    "GnnMetric",
    "GraphSignal",
    "InnerLoopConfig",
    "MetaModel",
    "MetaState",
    "MetafewError",
    "ModelScores",
    "OptimizerState",
    "Sgd",
    "Tape",
    "Tensor",
    "adam_step",
    "augment_support",
    "average_support_pairs",
    "baseline_finetune_predict",
    "center_crop_resize",
    "ensemble_predict",
    "generate_synthetic_domains",
    "gnn_predict",
    "inner_finetune",
    "load_checkpoint",
    "load_image_folder",
    "load_model",
    "merge_params",
    "meta_step",
    "sample_episode",
    "save_checkpoint",
    "save_model",
    "sgd_step",
    "split_params",
    "synthetic_domain",
    "train_meta",
    "two_class_task",
]
