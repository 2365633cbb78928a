"""Dataset I/O, batch assembly, and a synthetic trajectory generator.

Trajectories travel as JSON lines: {"id": ..., "points": [[lon, lat, t], ...]}
with an optional integer "label". Batches pad every trajectory to a shared
length and carry, per pooling step, flat gather indices that place each
point row into its patch slot.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .encoding import DEFAULT_PRECISIONS, build_hierarchy, dynamic_max_patch_len
from .geo import BoundingBox, GpsPoint, Trajectory, spatial_context, temporal_context_array

logger = logging.getLogger(__name__)

__all__ = [
    "Batch",
    "PatchTransition",
    "SyntheticSpec",
    "generate_synthetic",
    "load_jsonl",
    "make_batch",
    "make_batches",
    "save_jsonl",
]


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------


def trajectory_to_record(traj: Trajectory) -> dict:
    rec = {
        "id": traj.id,
        "points": [[p.lon, p.lat, int(p.t)] for p in traj.points],
    }
    if traj.label is not None:
        rec["label"] = int(traj.label)
    return rec


def record_to_trajectory(rec: dict) -> Trajectory:
    points = [GpsPoint(float(lon), float(lat), int(t)) for lon, lat, t in rec["points"]]
    label = rec.get("label")
    return Trajectory(str(rec["id"]), points, None if label is None else int(label))


def save_jsonl(trajs: Iterable[Trajectory], path) -> int:
    n = 0
    with open(path, "w") as fh:
        for traj in trajs:
            fh.write(json.dumps(trajectory_to_record(traj)) + "\n")
            n += 1
    return n


def load_jsonl(path, strict: bool = True) -> list[Trajectory]:
    """Read trajectories from JSON lines.

    With strict=False, malformed lines are skipped with a warning instead of
    raising; blank lines are always ignored.
    """
    out: list[Trajectory] = []
    bad = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(record_to_trajectory(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                if strict:
                    raise ValueError(f"{path}:{lineno}: bad trajectory record: {exc}") from exc
                bad += 1
    if bad:
        logger.warning("skipped %d malformed lines in %s", bad, path)
    return out


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class PatchTransition:
    """Gather plan for one pooling step.

    index holds flat row indices into the [CLS]-stripped finer level reshaped
    to (B * L_finer, d); pad slots point at row 0 and are masked out by
    slot_mask. mask flags real patches, lengths the points per patch.
    """

    index: np.ndarray  # (B, L_next, M) int64
    slot_mask: np.ndarray  # (B, L_next, M) bool
    mask: np.ndarray  # (B, L_next) bool
    lengths: np.ndarray  # (B, L_next) int64
    M: int


@dataclass
class Batch:
    ids: list[str]
    S: np.ndarray  # (B, L1, 6) spatial context, model dtype
    T: np.ndarray  # (B, L1, 6) temporal context, model dtype
    mask1: np.ndarray  # (B, L1) bool
    lengths1: np.ndarray  # (B,) int64
    transitions: list[PatchTransition]
    labels: Optional[np.ndarray] = None  # (B,) int64 when every trajectory has one
    durations: Optional[np.ndarray] = None  # (B,) float64 seconds, last minus first

    @property
    def size(self) -> int:
        return len(self.ids)


def make_batch(
    trajs: Sequence[Trajectory],
    box: BoundingBox,
    precisions: tuple[int, ...] = DEFAULT_PRECISIONS,
    dtype=np.float32,
    start_time_only: bool = False,
) -> Batch:
    """Pad trajectories to a common length and precompute the pooling plans.

    start_time_only replaces every point's temporal context with the first
    point's, so a downstream head can be trained to predict travel time
    without seeing any later timestamps.
    """
    if not trajs:
        raise ValueError("cannot batch zero trajectories")
    B = len(trajs)
    hiers = [build_hierarchy(t, precisions) for t in trajs]
    lengths1 = np.array([len(t) for t in trajs], dtype=np.int64)
    L1 = int(lengths1.max())

    S = np.zeros((B, L1, 6), dtype=dtype)
    T = np.zeros((B, L1, 6), dtype=dtype)
    mask1 = np.zeros((B, L1), dtype=bool)
    durations = np.zeros(B, dtype=np.float64)
    for b, traj in enumerate(trajs):
        n = len(traj)
        S[b, :n] = spatial_context(traj, box)
        ts = traj.times()
        if start_time_only:
            T[b, :n] = temporal_context_array(ts[:1])[0]
        else:
            T[b, :n] = temporal_context_array(ts)
        mask1[b, :n] = True
        durations[b] = float(ts[-1] - ts[0])

    transitions: list[PatchTransition] = []
    finer_maxlen = L1
    finer_lens = lengths1
    for step in range(len(precisions) - 1):
        length_lists = [h.lengths[step] for h in hiers]
        M = dynamic_max_patch_len(length_lists)
        Ln = max(len(ls) for ls in length_lists)
        index = np.zeros((B, Ln, M), dtype=np.int64)
        slot_mask = np.zeros((B, Ln, M), dtype=bool)
        mask = np.zeros((B, Ln), dtype=bool)
        lengths = np.zeros((B, Ln), dtype=np.int64)
        for b, ls in enumerate(length_lists):
            if sum(ls) != finer_lens[b]:
                raise AssertionError(
                    f"patch lengths {ls} do not cover {finer_lens[b]} rows (id={trajs[b].id})"
                )
            base = b * finer_maxlen
            pos = 0
            for j, l in enumerate(ls):
                index[b, j, :l] = base + pos + np.arange(l, dtype=np.int64)
                slot_mask[b, j, :l] = True
                lengths[b, j] = l
                pos += l
            mask[b, : len(ls)] = True
        transitions.append(PatchTransition(index, slot_mask, mask, lengths, M))
        finer_maxlen = Ln
        finer_lens = np.array([len(ls) for ls in length_lists], dtype=np.int64)

    labels = None
    if all(t.label is not None for t in trajs):
        labels = np.array([t.label for t in trajs], dtype=np.int64)
    return Batch(
        ids=[t.id for t in trajs],
        S=S,
        T=T,
        mask1=mask1,
        lengths1=lengths1,
        transitions=transitions,
        labels=labels,
        durations=durations,
    )


def make_batches(
    trajs: Sequence[Trajectory],
    box: BoundingBox,
    batch_size: int,
    precisions: tuple[int, ...] = DEFAULT_PRECISIONS,
    dtype=np.float32,
    start_time_only: bool = False,
    bucket: bool = True,
) -> list[Batch]:
    """Chunk trajectories into batches; bucketing sorts by length first so a
    batch pads to a similar length (stable sort keeps input order within ties)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(trajs)))
    if bucket:
        order.sort(key=lambda i: len(trajs[i]))
    out = []
    for lo in range(0, len(order), batch_size):
        chunk = [trajs[i] for i in order[lo : lo + batch_size]]
        out.append(make_batch(chunk, box, precisions, dtype, start_time_only))
    return out


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Random-walk trajectories inside a box, one motion regime per label.

    Headings follow a wrapped random walk whose turn rate depends on the
    regime; speed and sampling interval get uniform jitter; walks reflect off
    the box edges.
    """

    n: int = 100
    points_min: int = 30
    points_max: int = 120
    speed_mps: float = 10.0
    speed_jitter: float = 0.2
    dt_s: float = 15.0
    dt_jitter: float = 0.2
    regimes: tuple[float, ...] = (0.05, 1.0)  # heading-step std in radians
    lon_min: float = -8.70
    lon_max: float = -8.55
    lat_min: float = 41.10
    lat_max: float = 41.20
    start_epoch: int = 1_388_534_400  # 2014-01-01T00:00:00Z

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 2 <= self.points_min <= self.points_max:
            raise ValueError("need 2 <= points_min <= points_max")
        if self.speed_mps <= 0 or self.dt_s <= 0:
            raise ValueError("speed_mps and dt_s must be positive")
        if not 0 <= self.speed_jitter < 1 or not 0 <= self.dt_jitter < 1:
            raise ValueError("jitters must be in [0, 1)")
        if not self.regimes:
            raise ValueError("need at least one motion regime")
        if self.lon_min >= self.lon_max or self.lat_min >= self.lat_max:
            raise ValueError("degenerate bounding box")


def _reflect(value: float, lo: float, hi: float) -> tuple[float, bool]:
    if value < lo:
        return 2 * lo - value, True
    if value > hi:
        return 2 * hi - value, True
    return value, False


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> list[Trajectory]:
    """Deterministic synthetic corpus; trajectory labels are regime indices."""
    from .geo import M_PER_DEG

    rng = np.random.default_rng(seed)
    out: list[Trajectory] = []
    year = 365 * 24 * 3600
    for i in range(spec.n):
        regime = int(rng.integers(len(spec.regimes)))
        turn_std = spec.regimes[regime]
        n_pts = int(rng.integers(spec.points_min, spec.points_max + 1))
        lon = float(rng.uniform(spec.lon_min, spec.lon_max))
        lat = float(rng.uniform(spec.lat_min, spec.lat_max))
        az = float(rng.uniform(0.0, 2 * np.pi))
        t = int(spec.start_epoch + rng.integers(year))
        points = [GpsPoint(lon, lat, t)]
        for _ in range(n_pts - 1):
            az += float(rng.normal(0.0, turn_std))
            speed = spec.speed_mps * (1.0 + float(rng.uniform(-spec.speed_jitter, spec.speed_jitter)))
            dt = spec.dt_s * (1.0 + float(rng.uniform(-spec.dt_jitter, spec.dt_jitter)))
            step = speed * dt
            lat_new = lat + step * np.cos(az) / M_PER_DEG
            lon_new = lon + step * np.sin(az) / (M_PER_DEG * np.cos(np.radians(lat)))
            lat_new, hit_lat = _reflect(lat_new, spec.lat_min, spec.lat_max)
            lon_new, hit_lon = _reflect(lon_new, spec.lon_min, spec.lon_max)
            if hit_lat:
                az = np.pi - az
            if hit_lon:
                az = -az
            lat, lon = float(np.clip(lat_new, spec.lat_min, spec.lat_max)), float(
                np.clip(lon_new, spec.lon_min, spec.lon_max)
            )
            t += max(1, int(round(dt)))
            points.append(GpsPoint(lon, lat, t))
        out.append(Trajectory(f"syn-{seed}-{i:05d}", points, label=regime))
    return out
