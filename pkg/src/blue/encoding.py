"""Blurred encoding: a patch hierarchy from progressive coordinate rounding.

A raw trajectory keeps 5 decimal places per coordinate. Rounding every point
to 3 decimals and merging consecutive duplicates yields the level-2 patch
trajectory; rounding those patch keys to 2 decimals and merging again yields
level-3. Each merge is recorded as a run-length list, so the finer sequence
can always be re-partitioned exactly.

Grouping happens on integer mantissas (the rounded coordinate times 10^k) and
coarser keys are derived from finer ones by exact integer halving. This keeps
decimal ties ("round half away from zero") exact where refeeding a float
through the rounding formula could drift across the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geo import Trajectory

# Decimal places per level, finest first. The first entry is the raw level;
# only the later entries ever round anything.
DEFAULT_PRECISIONS = (5, 3, 2)


def round_coord(x: float, decimals: int) -> float:
    """Round one coordinate to `decimals` places, ties away from zero."""
    scale = 10.0 ** decimals
    return math.copysign(math.floor(abs(x) * scale + 0.5), x) / scale


def _mantissas(values: np.ndarray, decimals: int) -> np.ndarray:
    """Signed integer mantissas: round(values, decimals) * 10**decimals."""
    scale = 10.0 ** decimals
    return (np.sign(values) * np.floor(np.abs(values) * scale + 0.5)).astype(np.int64)


def _halve_mantissas(m: np.ndarray, divisor: int) -> np.ndarray:
    """Re-round integer mantissas to a coarser scale, ties away from zero."""
    return np.sign(m) * ((np.abs(m) + divisor // 2) // divisor)


def _run_starts(mlon: np.ndarray, mlat: np.ndarray) -> np.ndarray:
    """Indices where a new run of equal (mlon, mlat) pairs begins."""
    change = (mlon[1:] != mlon[:-1]) | (mlat[1:] != mlat[:-1])
    return np.concatenate([[0], np.flatnonzero(change) + 1])


@dataclass(frozen=True)
class PatchKey:
    """Rounded coordinate cell shared by every point of a patch."""

    lon_r: float
    lat_r: float


def group_run_length(keys: Sequence) -> tuple[int, ...]:
    """Run lengths of consecutive equal keys, e.g. [A,B,B,B,C,C] -> (1, 3, 2)."""
    keys = list(keys)
    if not keys:
        raise ValueError("cannot group an empty key sequence")
    lengths = []
    run = 1
    for prev, cur in zip(keys, keys[1:]):
        if cur == prev:
            run += 1
        else:
            lengths.append(run)
            run = 1
    lengths.append(run)
    return tuple(lengths)


@dataclass(frozen=True)
class PatchHierarchy:
    """Run-length partitions of one trajectory at every precision level.

    `lengths[k]` partitions level k+1 into the patches of level k+2, and
    `keys[k]` holds one rounded-cell key per patch at that coarser level.
    With the default precisions there are two transitions; the property
    aliases L_12, L_23, keys_2, keys_3 name them directly.
    """

    precisions: tuple[int, ...]
    level1_len: int
    lengths: tuple[tuple[int, ...], ...]
    keys: tuple[tuple[PatchKey, ...], ...]

    @property
    def L_12(self) -> tuple[int, ...]:
        return self.lengths[0]

    @property
    def L_23(self) -> tuple[int, ...]:
        return self.lengths[1]

    @property
    def keys_2(self) -> tuple[PatchKey, ...]:
        return self.keys[0]

    @property
    def keys_3(self) -> tuple[PatchKey, ...]:
        return self.keys[1]

    def level_lengths(self) -> tuple[int, ...]:
        """Sequence length at each level, finest first."""
        return (self.level1_len,) + tuple(len(ls) for ls in self.lengths)


def build_hierarchy(
    traj: Trajectory, precisions: Sequence[int] = DEFAULT_PRECISIONS
) -> PatchHierarchy:
    """Partition a trajectory into nested coordinate-cell patches.

    `precisions` lists decimal places per level, finest first, strictly
    decreasing after the raw first entry. The second entry rounds the raw
    coordinates; every later entry re-rounds the previous level's keys.
    """
    precisions = tuple(int(p) for p in precisions)
    if not precisions:
        raise ValueError("need at least the raw precision level")
    if any(b >= a for a, b in zip(precisions, precisions[1:])):
        raise ValueError(f"precisions must be strictly decreasing, got {precisions}")
    if any(p < 0 for p in precisions):
        raise ValueError(f"precisions must be non-negative, got {precisions}")

    coords = traj.coords()
    n = len(traj)
    all_lengths: list[tuple[int, ...]] = []
    all_keys: list[tuple[PatchKey, ...]] = []

    mlon = mlat = None
    for prev_p, cur_p in zip(precisions, precisions[1:]):
        if mlon is None:
            mlon = _mantissas(coords[:, 0], cur_p)
            mlat = _mantissas(coords[:, 1], cur_p)
        else:
            div = 10 ** (prev_p - cur_p)
            mlon = _halve_mantissas(mlon, div)
            mlat = _halve_mantissas(mlat, div)

        starts = _run_starts(mlon, mlat)
        ends = np.concatenate([starts[1:], [len(mlon)]])
        lengths = tuple(int(x) for x in (ends - starts))
        scale = 10.0 ** cur_p
        keys = tuple(
            PatchKey(float(a) / scale, float(b) / scale)
            for a, b in zip(mlon[starts], mlat[starts])
        )
        assert sum(lengths) == len(mlon), "patch lengths must cover the finer level"
        all_lengths.append(lengths)
        all_keys.append(keys)
        mlon, mlat = mlon[starts], mlat[starts]

    return PatchHierarchy(
        precisions=precisions,
        level1_len=n,
        lengths=tuple(all_lengths),
        keys=tuple(all_keys),
    )


def dynamic_max_patch_len(length_lists: Iterable[Sequence[int]]) -> int:
    """Largest patch length across a batch of run-length lists."""
    m = 0
    seen = False
    for lengths in length_lists:
        seen = True
        if lengths:
            m = max(m, max(lengths))
    if not seen:
        raise ValueError("no length lists given")
    return m
