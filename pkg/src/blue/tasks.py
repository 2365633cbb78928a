"""Downstream tasks on top of pretrained trajectory representations.

Three consumers of the [CLS] vector:
  * travel-time estimation — a small MLP regresses the trip duration, with
    every temporal context replaced by the first point's so no later
    timestamp can leak into the input;
  * trajectory classification — the same MLP shape ending in class logits;
  * most-similar retrieval — queries are matched against a database of
    distractors plus a downsampled variant of each query, ranked by the dot
    product of the embeddings.

Heads can train with the encoder frozen (embeddings precomputed, exactly
fixed) or jointly with it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import make_batch, make_batches
from .geo import BoundingBox, Trajectory
from .model import BlueModel, Mlp2, ParamStore
from .optim import adam_step, zero_grads
from .train import EpochStats, embed_trajectories

logger = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0
    freeze_encoder: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ValueError(
                f"bad finetune settings: batch_size={self.batch_size}, "
                f"epochs={self.epochs}, lr={self.lr}"
            )


class TaskHead:
    """Two-layer MLP with its own parameter store."""

    def __init__(self, d: int, n_out: int, rng, dtype):
        self.store = ParamStore(dtype)
        self.mlp = Mlp2(self.store, "task", d, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)

    def parameters(self):
        return self.store.all()


def _cls_tensor(model: BlueModel, batch, frozen: bool, train: bool, rng) -> Tensor:
    if frozen:
        return Tensor(model.embed(batch))
    return model.encode(batch, train=train, rng=rng).cls


def _finetune_loop(model, head, batches, val_batches, cfg, loss_of_batch):
    """Shared optimizer loop; loss_of_batch(batch, train, rng) -> scalar Tensor."""
    shuffle_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)
    )
    params = list(head.parameters())
    if not cfg.freeze_encoder:
        params += model.parameters()
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for bi in shuffle_rng.permutation(len(batches)):
            batch = batches[bi]
            loss = loss_of_batch(batch, True, dropout_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite loss at finetune epoch {epoch}")
            loss.backward()
            adam_step(params, lr=cfg.lr)
            zero_grads(params)
            total += value * batch.size
            count += batch.size
        val = None
        if val_batches:
            vt, vc = 0.0, 0
            for batch in val_batches:
                vt += float(loss_of_batch(batch, False, None).data) * batch.size
                vc += batch.size
            val = vt / vc
        history.append(EpochStats(epoch, total / count, val))
        logger.info("finetune epoch %d/%d  train %.6f", epoch, cfg.epochs, total / count)
    return history


# ---------------------------------------------------------------------------
# Travel-time estimation
# ---------------------------------------------------------------------------


@dataclass
class TtePredictor:
    model: BlueModel
    head: TaskHead
    box: BoundingBox

    def predict(self, trajs: Sequence[Trajectory], batch_size: int = 256) -> np.ndarray:
        """Predicted trip durations (seconds), in input order."""
        cfg = self.model.config
        out = np.zeros(len(trajs), dtype=np.float64)
        order = sorted(range(len(trajs)), key=lambda i: len(trajs[i]))
        for lo in range(0, len(order), batch_size):
            sel = order[lo : lo + batch_size]
            batch = make_batch(
                [trajs[i] for i in sel], self.box, cfg.precisions, cfg.np_dtype,
                start_time_only=True,
            )
            pred = self.head(Tensor(self.model.embed(batch)))
            out[sel] = pred.data.reshape(-1)
        return out


@dataclass
class TteResult:
    predictor: TtePredictor
    history: list[EpochStats]
    n_dropped: int


def finetune_tte(
    model: BlueModel,
    box: BoundingBox,
    trajs: Sequence[Trajectory],
    cfg: FinetuneConfig,
    val_trajs: Optional[Sequence[Trajectory]] = None,
) -> TteResult:
    """Fit the duration head; loss is plain MSE on seconds."""
    usable = [t for t in trajs if len(t) >= 2]
    dropped = len(trajs) - len(usable)
    if dropped:
        logger.warning(
            "dropped %d trajectories with fewer than 2 points: no duration to learn", dropped
        )
    if not usable:
        raise ValueError("no trajectories with at least 2 points")
    mcfg = model.config
    head_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    head = TaskHead(mcfg.d, 1, head_rng, mcfg.np_dtype)

    batches = make_batches(
        usable, box, cfg.batch_size, mcfg.precisions, mcfg.np_dtype, start_time_only=True
    )
    val_batches = (
        make_batches(
            [t for t in val_trajs if len(t) >= 2], box, cfg.batch_size, mcfg.precisions,
            mcfg.np_dtype, start_time_only=True,
        )
        if val_trajs
        else []
    )

    def loss_of_batch(batch, train, rng):
        cls = _cls_tensor(model, batch, cfg.freeze_encoder, train, rng)
        pred = ad.reshape(head(cls), (batch.size,))
        labels = batch.durations.astype(mcfg.np_dtype)
        return ad.mean(ad.squared_error(pred, labels))

    history = _finetune_loop(model, head, batches, val_batches, cfg, loss_of_batch)
    return TteResult(TtePredictor(model, head, box), history, dropped)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


@dataclass
class ClassifierPredictor:
    model: BlueModel
    head: TaskHead
    box: BoundingBox
    n_classes: int

    def logits(self, trajs: Sequence[Trajectory], batch_size: int = 256) -> np.ndarray:
        cfg = self.model.config
        out = np.zeros((len(trajs), self.n_classes), dtype=np.float64)
        order = sorted(range(len(trajs)), key=lambda i: len(trajs[i]))
        for lo in range(0, len(order), batch_size):
            sel = order[lo : lo + batch_size]
            batch = make_batch([trajs[i] for i in sel], self.box, cfg.precisions, cfg.np_dtype)
            out[sel] = self.head(Tensor(self.model.embed(batch))).data
        return out

    def predict(self, trajs: Sequence[Trajectory], batch_size: int = 256) -> np.ndarray:
        return self.logits(trajs, batch_size).argmax(axis=1)

    def evaluate(self, trajs: Sequence[Trajectory], batch_size: int = 256) -> dict:
        labels = _require_labels(trajs)
        bad = sorted({int(l) for l in labels if l < 0 or l >= self.n_classes})
        if bad:
            raise ValueError(f"labels {bad} were never seen during training")
        pred = self.predict(trajs, batch_size)
        if self.n_classes == 2:
            return binary_metrics(pred, labels)
        out = f1_scores(pred, labels)
        out["accuracy"] = float(np.mean(pred == labels))
        return out


@dataclass
class ClassifyResult:
    predictor: ClassifierPredictor
    history: list[EpochStats]


def _require_labels(trajs: Sequence[Trajectory]) -> np.ndarray:
    missing = [t.id for t in trajs if t.label is None]
    if missing:
        raise ValueError(f"{len(missing)} trajectories have no label (first: {missing[0]})")
    return np.array([t.label for t in trajs], dtype=np.int64)


def finetune_classify(
    model: BlueModel,
    box: BoundingBox,
    trajs: Sequence[Trajectory],
    cfg: FinetuneConfig,
    val_trajs: Optional[Sequence[Trajectory]] = None,
) -> ClassifyResult:
    labels = _require_labels(trajs)
    if labels.min() < 0:
        raise ValueError("labels must be non-negative integers")
    n_classes = int(labels.max()) + 1
    if n_classes < 2:
        raise ValueError("need at least two classes to train a classifier")
    mcfg = model.config
    head_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    head = TaskHead(mcfg.d, n_classes, head_rng, mcfg.np_dtype)

    batches = make_batches(trajs, box, cfg.batch_size, mcfg.precisions, mcfg.np_dtype)
    val_batches = (
        make_batches(val_trajs, box, cfg.batch_size, mcfg.precisions, mcfg.np_dtype)
        if val_trajs
        else []
    )

    def loss_of_batch(batch, train, rng):
        if batch.labels is None:
            raise ValueError("classification batch lost its labels")
        cls = _cls_tensor(model, batch, cfg.freeze_encoder, train, rng)
        return ad.cross_entropy_logits(head(cls), batch.labels)

    history = _finetune_loop(model, head, batches, val_batches, cfg, loss_of_batch)
    return ClassifyResult(ClassifierPredictor(model, head, box, n_classes), history)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def regression_metrics(pred, true) -> dict:
    """MAE, RMSE, and MAPE (as a fraction; zero-valued targets excluded)."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError(f"bad prediction shapes: {pred.shape} vs {true.shape}")
    err = pred - true
    nz = true != 0
    mape = float(np.mean(np.abs(err[nz]) / np.abs(true[nz]))) if nz.any() else float("nan")
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err**2))),
        "mape": mape,
    }


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_scores(pred, true) -> dict:
    """Micro- and macro-averaged F1 over all classes present in either array."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError(f"bad label shapes: {pred.shape} vs {true.shape}")
    classes = np.union1d(pred, true)
    tps = fps = fns = 0
    f1s = []
    for c in classes:
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        f1s.append(_prf(tp, fp, fn)[2])
        tps, fps, fns = tps + tp, fps + fp, fns + fn
    _, _, micro = _prf(tps, fps, fns)
    return {"micro_f1": float(micro), "macro_f1": float(np.mean(f1s))}


def binary_metrics(pred, true) -> dict:
    """Accuracy, precision, recall, F1 with class 1 as the positive class."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError(f"bad label shapes: {pred.shape} vs {true.shape}")
    values = set(np.union1d(pred, true).tolist())
    if not values <= {0, 1}:
        raise ValueError(f"binary metrics need 0/1 labels, got {sorted(values)}")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    precision, recall, f1 = _prf(tp, fp, fn)
    return {
        "accuracy": float(np.mean(pred == true)),
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


# ---------------------------------------------------------------------------
# Most-similar trajectory retrieval
# ---------------------------------------------------------------------------


@dataclass
class RetrievalReport:
    hit_rate_1: float
    hit_rate_5: float
    mean_rank: float
    ranks: np.ndarray
    n_query: int
    n_database: int

    def to_dict(self) -> dict:
        return {
            "hit_rate_1": self.hit_rate_1,
            "hit_rate_5": self.hit_rate_5,
            "mean_rank": self.mean_rank,
            "n_query": self.n_query,
            "n_database": self.n_database,
        }


def downsample_variant(traj: Trajectory, drop_ratio: float, rng) -> Trajectory:
    """Copy with interior points independently dropped; endpoints always stay."""
    if not 0 <= drop_ratio < 1:
        raise ValueError(f"drop_ratio must be in [0, 1), got {drop_ratio}")
    pts = traj.points
    if len(pts) <= 2:
        return Trajectory(traj.id + "-v", list(pts), traj.label)
    kept = [pts[0]]
    kept += [p for p in pts[1:-1] if rng.random() >= drop_ratio]
    kept.append(pts[-1])
    return Trajectory(traj.id + "-v", kept, traj.label)


def build_msts_sets(
    trajs: Sequence[Trajectory],
    n_query: int,
    n_db: int,
    drop_ratio: float = 0.4,
    seed: int = 0,
) -> tuple[list[Trajectory], list[Trajectory], np.ndarray]:
    """Disjoint query and distractor samples, plus one variant per query.

    The database holds the distractors first, then the query variants, so the
    true match of query i sits at index n_db + i.
    """
    if n_query < 1 or n_db < 0:
        raise ValueError(f"bad retrieval sizes: n_query={n_query}, n_db={n_db}")
    if n_query + n_db > len(trajs):
        raise ValueError(
            f"need {n_query + n_db} distinct trajectories, only {len(trajs)} available"
        )
    rng = np.random.default_rng(seed)
    picks = rng.permutation(len(trajs))[: n_query + n_db]
    queries = [trajs[i] for i in picks[:n_query]]
    distractors = [trajs[i] for i in picks[n_query:]]
    variants = [downsample_variant(q, drop_ratio, rng) for q in queries]
    truth = n_db + np.arange(n_query, dtype=np.int64)
    return queries, distractors + variants, truth


def ranks_from_scores(scores: np.ndarray, truth_idx: np.ndarray) -> np.ndarray:
    """1-based rank of each truth column; ties resolved by database order."""
    scores = np.asarray(scores)
    truth_idx = np.asarray(truth_idx)
    ranks = np.zeros(scores.shape[0], dtype=np.int64)
    for i in range(scores.shape[0]):
        row = scores[i]
        s_true = row[truth_idx[i]]
        ranks[i] = 1 + int(np.sum(row > s_true)) + int(np.sum(row[: truth_idx[i]] == s_true))
    return ranks


def eval_msts(
    model: BlueModel,
    box: BoundingBox,
    queries: Sequence[Trajectory],
    database: Sequence[Trajectory],
    truth_idx: np.ndarray,
    batch_size: int = 256,
) -> RetrievalReport:
    """Embed both sides, rank by dot product, and summarize."""
    Q = embed_trajectories(model, box, queries, batch_size).astype(np.float64)
    D = embed_trajectories(model, box, database, batch_size).astype(np.float64)
    ranks = ranks_from_scores(Q @ D.T, truth_idx)
    return RetrievalReport(
        hit_rate_1=float(np.mean(ranks <= 1)),
        hit_rate_5=float(np.mean(ranks <= 5)),
        mean_rank=float(np.mean(ranks)),
        ranks=ranks,
        n_query=len(queries),
        n_database=len(database),
    )
