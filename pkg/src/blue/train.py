"""Self-supervised pretraining: reconstruct the context vectors of every
point from the pyramid representation.

The dataset is shuffled once into train/validation/test splits, the bounding
box is frozen from the train split, batches are length-bucketed once and
their order reshuffled every epoch. The checkpoint keeps the parameters of
the best validation epoch (the last epoch when there is no validation
split).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import make_batch, make_batches
from .geo import BoundingBox, Trajectory
from .model import BlueModel, ModelConfig
from .optim import adam_step, zero_grads

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-4
    epochs: int = 30
    seed: int = 0
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    d_max: float = 1000.0

    def __post_init__(self) -> None:
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValueError(f"fractions must be three non-negative numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {self.fractions}")
        if self.fractions[0] <= 0:
            raise ValueError("the train fraction must be positive")
        if self.d_max <= 0:
            raise ValueError(f"d_max must be positive, got {self.d_max}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "lr": self.lr,
            "epochs": self.epochs,
            "seed": self.seed,
            "fractions": list(self.fractions),
            "d_max": self.d_max,
        }


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: Optional[float]


@dataclass
class PretrainResult:
    model: BlueModel
    box: BoundingBox
    history: list[EpochStats]
    best_epoch: int
    train_trajs: list[Trajectory]
    val_trajs: list[Trajectory]
    test_trajs: list[Trajectory]
    checkpoint_path: Optional[Path] = None


def split_trajectories(
    trajs: Sequence[Trajectory], fractions: tuple[float, float, float], seed: int
) -> tuple[list[Trajectory], list[Trajectory], list[Trajectory]]:
    """Shuffle once, then cut into train/validation/test parts."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(trajs))
    n = len(trajs)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    picks = [trajs[i] for i in order]
    return picks[:n_train], picks[n_train : n_train + n_val], picks[n_train + n_val :]


def _mean_loss(model: BlueModel, batches, train=False, rng=None) -> float:
    total, count = 0.0, 0
    for batch in batches:
        loss = model.forward_loss(batch, train=train, rng=rng)
        total += float(loss.data) * batch.size
        count += batch.size
    return total / max(count, 1)


def _snapshot(model: BlueModel) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: BlueModel, snap: list[np.ndarray]) -> None:
    for p, arr in zip(model.parameters(), snap):
        p.data[...] = arr


def pretrain(
    trajs: Sequence[Trajectory],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint_path=None,
    history_path=None,
    initial_model: Optional[BlueModel] = None,
) -> PretrainResult:
    """Train the reconstruction objective; returns the best-validation model."""
    if len(trajs) < 1:
        raise ValueError("no trajectories to train on")
    train_set, val_set, test_set = split_trajectories(trajs, train_cfg.fractions, train_cfg.seed)
    if not train_set:
        raise ValueError("the train split is empty; lower the other fractions")
    box = BoundingBox.from_trajectories(train_set, d_max=train_cfg.d_max)

    seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
    init_rng, shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in seeds)
    model = initial_model if initial_model is not None else BlueModel(model_cfg, init_rng)

    dtype = model.config.np_dtype
    precisions = model.config.precisions
    batches = make_batches(train_set, box, train_cfg.batch_size, precisions, dtype)
    val_batches = (
        make_batches(val_set, box, train_cfg.batch_size, precisions, dtype) if val_set else []
    )
    logger.info(
        "pretraining on %d trajectories (%d batches), validating on %d",
        len(train_set), len(batches), len(val_set),
    )

    params = model.parameters()
    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = -1
    best_params: Optional[list[np.ndarray]] = None
    t0 = time.monotonic()
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(batches))
        total, count = 0.0, 0
        for j, bi in enumerate(order):
            batch = batches[bi]
            loss = model.forward_loss(batch, train=True, rng=dropout_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {j + 1}/{len(order)}; "
                    "lower the learning rate"
                )
            loss.backward()
            adam_step(params, lr=train_cfg.lr)
            zero_grads(params)
            total += value * batch.size
            count += batch.size
        train_loss = total / count
        val_loss = _mean_loss(model, val_batches) if val_batches else None
        history.append(EpochStats(epoch, train_loss, val_loss))
        logger.info(
            "epoch %d/%d  train %.6f  val %s  (%.1fs)",
            epoch, train_cfg.epochs, train_loss,
            "-" if val_loss is None else f"{val_loss:.6f}", time.monotonic() - t0,
        )
        score = val_loss if val_loss is not None else np.inf
        if score < best_val:
            best_val = score
            best_epoch = epoch
            best_params = _snapshot(model)

    if best_params is not None:
        _restore(model, best_params)
    else:
        best_epoch = history[-1].epoch if history else 0

    if history_path is not None:
        write_history_csv(history_path, history)
    result = PretrainResult(model, box, history, best_epoch, train_set, val_set, test_set)
    if checkpoint_path is not None:
        card = {
            "kind": "pretrained-model",
            "model_config": model.config.to_dict(),
            "train_config": train_cfg.to_dict(),
            "n_train": len(train_set),
            "n_val": len(val_set),
            "n_test": len(test_set),
            "best_epoch": best_epoch,
            "final_train_loss": history[-1].train_loss,
            "best_val_loss": None if not val_batches else best_val,
        }
        result.checkpoint_path = save_checkpoint(checkpoint_path, model, box, card=card)
        logger.info("checkpoint written to %s", result.checkpoint_path)
    return result


def write_history_csv(path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            writer.writerow(
                [row.epoch, f"{row.train_loss:.8f}",
                 "" if row.val_loss is None else f"{row.val_loss:.8f}"]
            )


def embed_trajectories(
    model: BlueModel, box: BoundingBox, trajs: Sequence[Trajectory], batch_size: int = 256
) -> np.ndarray:
    """Representations for trajectories in their given order, shape (n, d)."""
    out = np.zeros((len(trajs), model.config.d), dtype=model.config.np_dtype)
    order = sorted(range(len(trajs)), key=lambda i: len(trajs[i]))
    for lo in range(0, len(order), batch_size):
        sel = order[lo : lo + batch_size]
        batch = make_batch(
            [trajs[i] for i in sel], box, model.config.precisions, model.config.np_dtype
        )
        out[sel] = model.embed(batch)
    return out
