"""Domain randomization of debris placement and appearance."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import TYPE_CHECKING, List, Optional, Tuple, Union

import numpy as np
from shapely.geometry import LineString

from .geometry import CameraCalib, GroundPose, ground_row, pixel_to_lateral, project_cuboid_bbox

if TYPE_CHECKING:
    from .assets import DebrisAsset
    from .scene import LaneSet

SNAP_LIMIT_RAD = math.radians(15.0)
Interval = Tuple[float, float]


def derive_seed(dataset_seed: int, record_id: str, attempt: int) -> int:
    """Stable 64-bit seed for one (dataset, record, attempt) triple."""
    payload = f"{int(dataset_seed)}\x1f{record_id}\x1f{int(attempt)}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _interval(value, name: str) -> Interval:
    lo, hi = (float(v) for v in value)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ValueError(f"{name} must be a finite [lo, hi] interval, got {value}")
    return (lo, hi)


@dataclass(frozen=True)
class RandomizationConfig:
    max_distance_m: float = 300.0
    min_bbox_height_px: float = 10.0
    min_forward_m: float = 5.0
    yaw_range: Interval = (-math.pi, math.pi)
    pitch_range: Interval = (-0.3, 0.3)
    roll_range: Interval = (-0.3, 0.3)
    gain_range: Interval = (0.7, 1.3)
    fog_beta_range: Interval = (0.0, 0.02)
    max_attempts: int = 50
    # "and": forward <= max_distance_m and height >= min_bbox_height_px.
    # "or": forward is drawn up to far_limit_m and either bound suffices.
    bound_mode: str = "and"
    far_limit_m: float = 600.0

    def __post_init__(self):
        for name in ("yaw_range", "pitch_range", "roll_range", "gain_range", "fog_beta_range"):
            object.__setattr__(self, name, _interval(getattr(self, name), name))
        if not self.max_distance_m > 0:
            raise ValueError("max_distance_m must be positive")
        if not self.min_bbox_height_px >= 1:
            raise ValueError("min_bbox_height_px must be >= 1")
        if not 0 < self.min_forward_m < self.max_distance_m:
            raise ValueError("min_forward_m must lie in (0, max_distance_m)")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.bound_mode not in ("and", "or"):
            raise ValueError(f"bound_mode must be 'and' or 'or', got {self.bound_mode!r}")
        if self.bound_mode == "or" and not self.far_limit_m > self.max_distance_m:
            raise ValueError("far_limit_m must exceed max_distance_m in 'or' mode")
        if self.gain_range[0] < 0 or self.fog_beta_range[0] < 0:
            raise ValueError("gain and fog ranges must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RandomizationConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown randomization keys: {unknown}")
        return cls(**d)

    @property
    def forward_upper(self) -> float:
        return self.max_distance_m if self.bound_mode == "and" else self.far_limit_m


@dataclass(frozen=True)
class PlacementSample:
    pose: GroundPose
    gains: Tuple[float, float, float]
    fog_beta: float
    asset_id: str
    seed_used: int = 0

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "gains": list(self.gains),
            "fog_beta": self.fog_beta,
            "asset_id": self.asset_id,
            "seed_used": self.seed_used,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementSample":
        return cls(
            pose=GroundPose.from_dict(d["pose"]),
            gains=tuple(float(g) for g in d["gains"]),
            fog_beta=float(d["fog_beta"]),
            asset_id=str(d["asset_id"]),
            seed_used=int(d["seed_used"]),
        )


@dataclass(frozen=True)
class Exhausted:
    """No acceptable placement within ``attempts`` draws; ``reason`` is the commonest failure."""

    reason: str
    attempts: int
    failures: dict = field(default_factory=dict)


def lane_intervals(calib: CameraCalib, region, forward: float) -> List[Interval]:
    """Column intervals where the lane region crosses the ground row at ``forward``."""
    v = ground_row(calib, forward)
    minx, miny, maxx, maxy = region.bounds
    if not miny <= v <= maxy:
        return []
    hit = region.intersection(LineString([(minx - 1.0, v), (maxx + 1.0, v)]))
    if hit.is_empty:
        return []
    parts = getattr(hit, "geoms", [hit])
    out = []
    for g in parts:
        if g.geom_type != "LineString" or g.length <= 0:
            continue
        xs = [c[0] for c in g.coords]
        out.append((min(xs), max(xs)))
    return sorted(out)


def _pick_in_intervals(intervals: List[Interval], r: float) -> float:
    total = sum(hi - lo for lo, hi in intervals)
    target = r * total
    for lo, hi in intervals:
        span = hi - lo
        if target <= span:
            return lo + target
        target -= span
    return intervals[-1][1]


def _clamp(x: float, limit: float) -> float:
    return max(-limit, min(limit, x))


def sample_placement(config: RandomizationConfig, calib: CameraCalib, lanes: "LaneSet",
                     asset: "DebrisAsset", rng: np.random.Generator,
                     image_size: Optional[Tuple[int, int]] = None,
                     seed_used: int = 0) -> Union[PlacementSample, Exhausted]:
    """Rejection-sample one placement for ``asset``.

    Every attempt consumes the same number of random draws, so the sequence
    is fixed by the generator state alone. Lateral offsets are drawn
    uniformly across the lane region at the sampled forward distance.
    """
    region = lanes.region()
    lo, hi = config.min_forward_m, config.forward_upper
    failures: Counter = Counter()
    for _ in range(config.max_attempts):
        forward = hi - (hi - lo) * rng.random()
        r_lat = rng.random()
        yaw = rng.uniform(*config.yaw_range)
        pitch = rng.uniform(*config.pitch_range)
        roll = rng.uniform(*config.roll_range)
        gains = rng.uniform(config.gain_range[0], config.gain_range[1], size=3)
        fog_beta = rng.uniform(*config.fog_beta_range)

        intervals = lane_intervals(calib, region, forward)
        if not intervals:
            failures["off_road"] += 1
            continue
        u = _pick_in_intervals(intervals, r_lat)
        pose = GroundPose(
            forward=forward,
            lateral=pixel_to_lateral(calib, u, forward),
            yaw=yaw,
            obj_pitch=_clamp(pitch, SNAP_LIMIT_RAD),
            roll=_clamp(roll, SNAP_LIMIT_RAD),
        )
        bbox = project_cuboid_bbox(calib, pose, asset.dims, image_size)
        if bbox is None:
            failures["off_road"] += 1
            continue
        tall_enough = bbox[3] - bbox[1] >= config.min_bbox_height_px
        near_enough = forward <= config.max_distance_m
        if config.bound_mode == "and":
            ok = tall_enough and near_enough
        else:
            ok = tall_enough or near_enough
        if not ok:
            failures["too_small" if near_enough or config.bound_mode == "and" else "too_far"] += 1
            continue
        return PlacementSample(
            pose=pose,
            gains=tuple(float(g) for g in gains),
            fog_beta=float(fog_beta),
            asset_id=asset.asset_id,
            seed_used=seed_used,
        )
    reason = failures.most_common(1)[0][0]
    return Exhausted(reason=reason, attempts=config.max_attempts, failures=dict(failures))
