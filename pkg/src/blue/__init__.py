"""blue: blurred-encoding trajectory representation learning.

A pyramid encoder-decoder that builds its hierarchy by progressively rounding
GPS coordinate decimals, pools points into coordinate-cell patches with
attention, and pretrains by reconstructing per-point spatial and temporal
context vectors.
"""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_jsonl,
    make_batch,
    make_batches,
    save_jsonl,
)
from .encoding import build_hierarchy
from .geo import BoundingBox, GpsPoint, Trajectory
from .model import BlueModel, ModelConfig
from .preprocess import PreprocessConfig, clean_trajectory, filter_trajectories
from .tasks import (
    FinetuneConfig,
    build_msts_sets,
    eval_msts,
    finetune_classify,
    finetune_tte,
)
from .train import TrainConfig, embed_trajectories, pretrain

__all__ = [
    "BlueModel",
    "BoundingBox",
    "FinetuneConfig",
    "GpsPoint",
    "ModelConfig",
    "PreprocessConfig",
    "SyntheticSpec",
    "TrainConfig",
    "Trajectory",
    "__version__",
    "build_hierarchy",
    "build_msts_sets",
    "clean_trajectory",
    "embed_trajectories",
    "eval_msts",
    "filter_trajectories",
    "finetune_classify",
    "finetune_tte",
    "generate_synthetic",
    "load_checkpoint",
    "load_jsonl",
    "make_batch",
    "make_batches",
    "pretrain",
    "save_checkpoint",
    "save_jsonl",
]
