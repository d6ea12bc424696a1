"""Scene manifests: real images with calibration, labels, lanes and environment tags.

A manifest is JSONL with one record per line. Image paths inside a manifest
are relative to the manifest's directory; in memory they are held resolved.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.ops import unary_union

from .geometry import Box, CameraCalib
from .randomizer import derive_seed

ROAD_TYPES = ("highway", "freeway", "suburban", "urban", "rural", "dirt", "parking")
TIMES_OF_DAY = ("day", "night", "dawn_dusk", "sunset_sunrise")
WEATHERS = ("clear", "sun", "moon", "cloud", "rain", "snow", "fog")
TRAFFIC_LEVELS = ("low", "med", "high")
GT_CLASSES = ("vehicle", "pedestrian", "bike", "debris", "other")

MANIFEST_KEYS = frozenset({"id", "image", "width", "height", "camera", "gt_objects", "lanes", "env"})


class ManifestError(ValueError):
    """Raised for malformed manifests or records violating their invariants."""


@dataclass(frozen=True)
class EnvTags:
    road_type: str
    time_of_day: str
    weather: str
    traffic_level: str

    def __post_init__(self):
        for name, allowed in (("road_type", ROAD_TYPES), ("time_of_day", TIMES_OF_DAY),
                              ("weather", WEATHERS), ("traffic_level", TRAFFIC_LEVELS)):
            value = getattr(self, name)
            if value not in allowed:
                raise ValueError(f"invalid {name} {value!r}; expected one of {allowed}")

    @property
    def key(self) -> Tuple[str, str, str, str]:
        return (self.road_type, self.time_of_day, self.weather, self.traffic_level)

    def to_dict(self) -> dict:
        return {"road_type": self.road_type, "time_of_day": self.time_of_day,
                "weather": self.weather, "traffic_level": self.traffic_level}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvTags":
        return cls(d["road_type"], d["time_of_day"], d["weather"], d["traffic_level"])


@dataclass(frozen=True)
class GtObject:
    bbox: Box
    category: str
    distance_m: Optional[float] = None
    size_3d: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        if self.distance_m is not None:
            object.__setattr__(self, "distance_m", float(self.distance_m))
        if self.size_3d is not None:
            object.__setattr__(self, "size_3d", tuple(float(v) for v in self.size_3d))
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if self.category not in GT_CLASSES:
            raise ValueError(f"invalid class {self.category!r}")
        if self.distance_m is not None and not self.distance_m > 0:
            raise ValueError(f"distance_m must be positive, got {self.distance_m}")

    @property
    def height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    def to_dict(self) -> dict:
        d = {"bbox": list(self.bbox), "class": self.category}
        if self.distance_m is not None:
            d["distance_m"] = self.distance_m
        if self.size_3d is not None:
            d["size_3d"] = list(self.size_3d)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GtObject":
        size = d.get("size_3d")
        dist = d.get("distance_m")
        return cls(
            bbox=tuple(float(v) for v in d["bbox"]),
            category=d["class"],
            distance_m=None if dist is None else float(dist),
            size_3d=None if size is None else tuple(float(v) for v in size),
        )


Polygon2D = Tuple[Tuple[float, float], ...]


def _as_polygon(points) -> Polygon2D:
    return tuple((float(x), float(y)) for x, y in points)


@dataclass(frozen=True)
class LaneSet:
    ego: Polygon2D
    left: Optional[Polygon2D] = None
    right: Optional[Polygon2D] = None

    def __post_init__(self):
        for name in ("ego", "left", "right"):
            poly = getattr(self, name)
            if poly is None:
                continue
            if len(poly) < 3:
                raise ValueError(f"{name} lane polygon needs >= 3 vertices")
            shape = Polygon(poly)
            if not shape.exterior.is_simple:
                raise ValueError(f"{name} lane polygon is self-intersecting")
        if not Polygon(self.ego).area > 0:
            raise ValueError("ego lane polygon has zero area")

    def polygons(self) -> List[Polygon2D]:
        return [p for p in (self.ego, self.left, self.right) if p is not None]

    def region(self):
        """Union of all drivable lane polygons as a shapely geometry."""
        return unary_union([Polygon(p) for p in self.polygons()])

    def contains(self, u: float, v: float) -> bool:
        """True if the image point lies inside (or on the edge of) any lane polygon."""
        pt = Point(u, v)
        return any(Polygon(p).covers(pt) for p in self.polygons())

    def to_dict(self) -> dict:
        d = {"ego": [list(p) for p in self.ego]}
        for name in ("left", "right"):
            poly = getattr(self, name)
            if poly is not None:
                d[name] = [list(p) for p in poly]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LaneSet":
        return cls(
            ego=_as_polygon(d["ego"]),
            left=_as_polygon(d["left"]) if d.get("left") else None,
            right=_as_polygon(d["right"]) if d.get("right") else None,
        )


@dataclass(frozen=True)
class SceneRecord:
    id: str
    image_path: str
    width: int
    height: int
    camera: CameraCalib
    gt_objects: Tuple[GtObject, ...] = field(default_factory=tuple)
    lanes: LaneSet = None  # type: ignore[assignment]
    env: EnvTags = None  # type: ignore[assignment]

    def to_dict(self, base_dir: Optional[str] = None) -> dict:
        image = self.image_path
        if base_dir is not None:
            image = os.path.relpath(self.image_path, base_dir)
        return {
            "id": self.id,
            "image": image.replace(os.sep, "/"),
            "width": self.width,
            "height": self.height,
            "camera": self.camera.to_dict(),
            "gt_objects": [g.to_dict() for g in self.gt_objects],
            "lanes": self.lanes.to_dict(),
            "env": self.env.to_dict(),
        }


def validate_record(record: SceneRecord) -> None:
    """Raise :class:`ManifestError` if ``record`` breaks a record-level invariant."""
    problems = []
    if not (record.width > 0 and record.height > 0):
        problems.append(f"non-positive image size {record.width}x{record.height}")
    if record.lanes is None:
        problems.append("missing lanes")
    if record.env is None:
        problems.append("missing env")
    for i, gt in enumerate(record.gt_objects):
        x0, y0, x1, y1 = gt.bbox
        if x0 < 0 or y0 < 0 or x1 > record.width or y1 > record.height:
            problems.append(f"gt_objects[{i}] bbox {gt.bbox} outside image")
    if problems:
        raise ManifestError(f"record {record.id!r}: " + "; ".join(problems))


def record_from_dict(d: dict, base_dir: str = ".") -> SceneRecord:
    keys = set(d)
    if keys != MANIFEST_KEYS:
        missing = sorted(MANIFEST_KEYS - keys)
        extra = sorted(keys - MANIFEST_KEYS)
        raise ManifestError(f"record {d.get('id')!r}: missing keys {missing}, unexpected keys {extra}")
    rid = str(d["id"])
    try:
        record = SceneRecord(
            id=rid,
            image_path=os.path.normpath(os.path.join(base_dir, d["image"])),
            width=int(d["width"]),
            height=int(d["height"]),
            camera=CameraCalib.from_dict(d["camera"]),
            gt_objects=tuple(GtObject.from_dict(g) for g in d["gt_objects"]),
            lanes=LaneSet.from_dict(d["lanes"]),
            env=EnvTags.from_dict(d["env"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"record {rid!r}: {exc}") from exc
    validate_record(record)
    return record


def load_manifest(path, check_images: bool = True) -> List[SceneRecord]:
    """Read and validate a JSONL scene manifest.

    Raises:
        ManifestError: on a JSON parse error (with line number), a missing
            image file, or an invariant violation (naming the record id).
    """
    path = os.fspath(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(d, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            record = record_from_dict(d, base_dir)
            if check_images and not os.path.isfile(record.image_path):
                raise ManifestError(f"record {record.id!r}: image not found: {record.image_path}")
            records.append(record)
    return records


def dump_record(record: SceneRecord, base_dir: str) -> str:
    return json.dumps(record.to_dict(base_dir), sort_keys=True)


def save_manifest(records: Iterable[SceneRecord], path) -> None:
    path = os.fspath(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    lines = [dump_record(r, base_dir) + "\n" for r in records]
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    os.replace(tmp, path)


def stratified_sample(records: Sequence[SceneRecord], per_bucket: int, seed: int) -> List[SceneRecord]:
    """Take up to ``per_bucket`` records from every environment bucket.

    Selection inside a bucket is a seeded draw without replacement; the
    result is ordered by (bucket key, record id) regardless of input order.
    """
    if per_bucket < 1:
        raise ValueError(f"per_bucket must be >= 1, got {per_bucket}")
    groups: Dict[tuple, List[SceneRecord]] = defaultdict(list)
    for r in records:
        groups[r.env.key].append(r)
    out = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda r: r.id)
        k = min(per_bucket, len(members))
        rng = np.random.default_rng(derive_seed(seed, "|".join(key), 0))
        picked = rng.choice(len(members), size=k, replace=False)
        out.extend(sorted((members[i] for i in picked), key=lambda r: r.id))
    return out
