"""Geodesic and calendar features for GPS trajectories.

Turns raw (lon, lat, t) points into the per-point context vectors the model
consumes: normalized position inside a bounding box, capped distances and
azimuths to the neighboring points, and six calendar fields shifted to be
centered on zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Mean Earth radius in meters (sphere model).
EARTH_RADIUS_M = 6_371_008.8

# Meters per degree of latitude on that sphere; also meters per degree of
# longitude at the equator.
M_PER_DEG = math.pi * EARTH_RADIUS_M / 180.0

# Column order of the arrays produced by spatial_context / temporal_context.
SPATIAL_FIELDS = ("lon_norm", "lat_norm", "d_fwd", "az_fwd", "d_bwd", "az_bwd")
TEMPORAL_FIELDS = (
    "day_of_year",
    "day_of_month",
    "day_of_week",
    "hour_of_day",
    "minute_of_hour",
    "second_of_minute",
)


@dataclass(frozen=True)
class GpsPoint:
    """A single GPS fix: WGS-ish lon/lat in degrees, UTC epoch seconds."""

    lon: float
    lat: float
    t: int

    def __post_init__(self) -> None:
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude out of range: {self.lon}")
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.lat}")
        if self.t < 0:
            raise ValueError(f"negative timestamp: {self.t}")


@dataclass
class Trajectory:
    """An ordered, timestamped point sequence with an optional class label."""

    id: str
    points: list[GpsPoint]
    label: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError(f"trajectory {self.id!r} has no points")
        ts = [p.t for p in self.points]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"trajectory {self.id!r} has decreasing timestamps")

    def __len__(self) -> int:
        return len(self.points)

    def coords(self) -> np.ndarray:
        """(n, 2) float64 array of [lon, lat] rows."""
        return np.array([[p.lon, p.lat] for p in self.points], dtype=np.float64)

    def times(self) -> np.ndarray:
        """(n,) int64 array of epoch seconds."""
        return np.array([p.t for p in self.points], dtype=np.int64)

    @property
    def duration(self) -> int:
        return self.points[-1].t - self.points[0].t


@dataclass
class BoundingBox:
    """Spatial normalizer: lon/lat extent plus the distance cap d_max."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    d_max: float = 1000.0

    def __post_init__(self) -> None:
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ValueError(
                f"degenerate bounding box: lon [{self.lon_min}, {self.lon_max}], "
                f"lat [{self.lat_min}, {self.lat_max}]"
            )
        if self.d_max <= 0:
            raise ValueError(f"d_max must be positive, got {self.d_max}")

    @classmethod
    def from_trajectories(
        cls, trajectories: Sequence[Trajectory], d_max: float = 1000.0
    ) -> "BoundingBox":
        """Tight box around every point, widened slightly if an extent is zero."""
        if not trajectories:
            raise ValueError("cannot fit a bounding box to zero trajectories")
        coords = np.concatenate([t.coords() for t in trajectories], axis=0)
        lon_min, lat_min = coords.min(axis=0)
        lon_max, lat_max = coords.max(axis=0)
        if lon_min == lon_max:
            lon_min, lon_max = lon_min - 1e-6, lon_max + 1e-6
        if lat_min == lat_max:
            lat_min, lat_max = lat_min - 1e-6, lat_max + 1e-6
        return cls(float(lon_min), float(lon_max), float(lat_min), float(lat_max), d_max)


# ---------------------------------------------------------------------------
# Geodesic primitives
# ---------------------------------------------------------------------------


def _haversine_rad(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters; arguments in radians (arrays ok)."""
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    # Clip guards the sqrt against tiny negative rounding at antipodes.
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _bearing_rad(lon1, lat1, lon2, lat2):
    """Initial great-circle bearing in degrees [0, 360); radians in (arrays ok)."""
    dlon = lon2 - lon1
    y = np.sin(dlon) * np.cos(lat2)
    x = np.cos(lat1) * np.sin(lat2) - np.sin(lat1) * np.cos(lat2) * np.cos(dlon)
    deg = np.degrees(np.arctan2(y, x))
    return np.mod(deg + 360.0, 360.0)


def haversine_distance(a: GpsPoint, b: GpsPoint) -> float:
    """Great-circle distance between two points in meters."""
    return float(
        _haversine_rad(
            math.radians(a.lon), math.radians(a.lat),
            math.radians(b.lon), math.radians(b.lat),
        )
    )


def forward_azimuth(a: GpsPoint, b: GpsPoint) -> float:
    """Initial bearing from a to b, degrees in [0, 360); 0.0 for coincident points."""
    if a.lon == b.lon and a.lat == b.lat:
        return 0.0
    return float(
        _bearing_rad(
            math.radians(a.lon), math.radians(a.lat),
            math.radians(b.lon), math.radians(b.lat),
        )
    )


def path_length(traj: Trajectory) -> float:
    """Sum of consecutive great-circle hops in meters (0.0 for a single point)."""
    if len(traj) < 2:
        return 0.0
    c = np.radians(traj.coords())
    return float(np.sum(_haversine_rad(c[:-1, 0], c[:-1, 1], c[1:, 0], c[1:, 1])))


# ---------------------------------------------------------------------------
# Context features
# ---------------------------------------------------------------------------


def spatial_context(traj: Trajectory, box: BoundingBox) -> np.ndarray:
    """Per-point spatial features, shape (n, 6) float64.

    Columns follow SPATIAL_FIELDS: position normalized into the box, then
    forward distance/azimuth to the next point and backward distance/azimuth
    to the previous point. Distances are divided by box.d_max and capped at 1;
    azimuths are divided by 360 so they land in [0, 1). The first point's
    backward pair and the last point's forward pair are exactly 0. Points
    outside the box are clamped to its edge (logged once per trajectory).
    """
    coords = traj.coords()
    lon, lat = coords[:, 0], coords[:, 1]

    outside = (
        (lon < box.lon_min) | (lon > box.lon_max)
        | (lat < box.lat_min) | (lat > box.lat_max)
    )
    n_out = int(outside.sum())
    if n_out:
        logger.warning(
            "trajectory %s: %d of %d points outside the bounding box, clamping",
            traj.id, n_out, len(traj),
        )
        lon = np.clip(lon, box.lon_min, box.lon_max)
        lat = np.clip(lat, box.lat_min, box.lat_max)

    out = np.zeros((len(traj), 6), dtype=np.float64)
    out[:, 0] = (lon - box.lon_min) / (box.lon_max - box.lon_min)
    out[:, 1] = (lat - box.lat_min) / (box.lat_max - box.lat_min)

    if len(traj) >= 2:
        lon_r, lat_r = np.radians(lon), np.radians(lat)
        hop = _haversine_rad(lon_r[:-1], lat_r[:-1], lon_r[1:], lat_r[1:])
        az_fwd = _bearing_rad(lon_r[:-1], lat_r[:-1], lon_r[1:], lat_r[1:])
        az_bwd = _bearing_rad(lon_r[1:], lat_r[1:], lon_r[:-1], lat_r[:-1])
        same = (lon[:-1] == lon[1:]) & (lat[:-1] == lat[1:])
        az_fwd[same] = 0.0
        az_bwd[same] = 0.0

        out[:-1, 2] = np.minimum(hop / box.d_max, 1.0)
        out[:-1, 3] = az_fwd / 360.0
        out[1:, 4] = np.minimum(hop / box.d_max, 1.0)
        out[1:, 5] = az_bwd / 360.0

    return out


def temporal_context_array(ts: Sequence[int]) -> np.ndarray:
    """Calendar features for epoch seconds, shape (n, 6) float64 in [-0.5, 0.5].

    Columns follow TEMPORAL_FIELDS. Each raw field is scaled into [0, 1]
    (day-of-year by 365, day-of-month by 30, day-of-week by 6 with Monday = 0,
    hour by 23, minute and second by 59), clamped, then shifted down by 0.5.
    """
    arr = np.asarray(ts, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d sequence of timestamps, got shape {arr.shape}")
    if arr.size and arr.min() < 0:
        raise ValueError("negative timestamps are not supported")

    days = arr // 86400
    secs = arr - days * 86400
    d64 = days.astype("datetime64[D]")
    doy = (d64 - d64.astype("datetime64[Y]")).astype(np.int64) + 1
    dom = (d64 - d64.astype("datetime64[M]")).astype(np.int64) + 1
    dow = (days + 3) % 7  # 1970-01-01 was a Thursday; Monday = 0
    hour = secs // 3600
    minute = (secs // 60) % 60
    second = secs % 60

    cols = np.stack(
        [
            (doy - 1) / 365.0,
            (dom - 1) / 30.0,
            dow / 6.0,
            hour / 23.0,
            minute / 59.0,
            second / 59.0,
        ],
        axis=1,
    )
    np.clip(cols, 0.0, 1.0, out=cols)
    return cols - 0.5


def temporal_context(t: int) -> np.ndarray:
    """Calendar features for one epoch-seconds timestamp, shape (6,)."""
    return temporal_context_array([int(t)])[0]
