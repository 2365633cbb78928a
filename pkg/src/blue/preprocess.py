"""Trajectory cleaning: drift removal, stationary-cluster reduction, filters.

Drift points are detected by an implied-speed threshold against the last
retained point. Stationary clusters (long runs of points inside a small
radius around the run's first point) collapse to their first and last point.
Finally, trajectories that are too short, by path length or by coarse patch
count, are dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .encoding import DEFAULT_PRECISIONS, build_hierarchy
from .geo import Trajectory, haversine_distance, path_length

logger = logging.getLogger(__name__)


@dataclass
class PreprocessConfig:
    v_max: float = 33.3  # m/s; implied speeds above this mark drift points
    cluster_radius: float = 50.0  # m; radius of a stationary cluster
    cluster_count: int = 10  # runs strictly longer than this collapse
    min_length: float = 1000.0  # m; shorter paths are dropped
    min_level3_len: int = 2  # coarsest patch count below this is dropped

    def __post_init__(self) -> None:
        if self.v_max <= 0:
            raise ValueError(f"v_max must be positive, got {self.v_max}")
        if self.cluster_radius <= 0:
            raise ValueError(f"cluster_radius must be positive, got {self.cluster_radius}")
        if self.cluster_count < 1:
            raise ValueError(f"cluster_count must be >= 1, got {self.cluster_count}")
        if self.min_length < 0:
            raise ValueError(f"min_length must be >= 0, got {self.min_length}")
        if self.min_level3_len < 1:
            raise ValueError(f"min_level3_len must be >= 1, got {self.min_level3_len}")


def remove_drift(traj: Trajectory, cfg: PreprocessConfig) -> Trajectory:
    """Drop points whose implied speed from the last retained point is too high.

    The first point is always kept. A later point survives when the
    great-circle distance from the previously retained point, divided by the
    elapsed time, stays at or below cfg.v_max. Zero elapsed time keeps the
    point only if it did not move at all.
    """
    kept = [traj.points[0]]
    for p in traj.points[1:]:
        last = kept[-1]
        dt = p.t - last.t
        dist = haversine_distance(last, p)
        if dt > 0:
            ok = dist / dt <= cfg.v_max
        else:
            ok = dist == 0.0
        if ok:
            kept.append(p)
    return Trajectory(traj.id, kept, traj.label)


def reduce_redundancy(traj: Trajectory, cfg: PreprocessConfig) -> Trajectory:
    """Collapse long stationary runs to their first and last point.

    Scanning left to right, a run collects consecutive points within
    cfg.cluster_radius meters of the run's first point. Runs holding strictly
    more than cfg.cluster_count points keep only their endpoints; shorter
    runs pass through untouched.
    """
    pts = traj.points
    out = []
    i = 0
    n = len(pts)
    while i < n:
        j = i + 1
        while j < n and haversine_distance(pts[i], pts[j]) <= cfg.cluster_radius:
            j += 1
        run = pts[i:j]
        if len(run) > cfg.cluster_count:
            out.append(run[0])
            out.append(run[-1])
        else:
            out.extend(run)
        i = j
    return Trajectory(traj.id, out, traj.label)


def clean_trajectory(traj: Trajectory, cfg: PreprocessConfig) -> Trajectory:
    """remove_drift followed by reduce_redundancy."""
    return reduce_redundancy(remove_drift(traj, cfg), cfg)


def filter_trajectories(
    trajectories: Sequence[Trajectory], cfg: PreprocessConfig
) -> list[Trajectory]:
    """Keep trajectories long enough to carry a usable patch pyramid.

    A trajectory survives when its path length is at least cfg.min_length
    meters (boundary kept) and its coarsest-level patch count is at least
    cfg.min_level3_len. Expects already-cleaned input.
    """
    kept = []
    n_short, n_flat = 0, 0
    for traj in trajectories:
        if path_length(traj) < cfg.min_length:
            n_short += 1
            continue
        coarse = build_hierarchy(traj, DEFAULT_PRECISIONS).level_lengths()[-1]
        if coarse < cfg.min_level3_len:
            n_flat += 1
            continue
        kept.append(traj)
    if n_short or n_flat:
        logger.info(
            "filtered %d of %d trajectories (%d below %.0f m, %d with fewer than %d coarse patches)",
            n_short + n_flat, len(trajectories), n_short, cfg.min_length, n_flat,
            cfg.min_level3_len,
        )
    return kept
