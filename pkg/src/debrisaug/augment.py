"""Semantic placement checks and sprite compositing."""

from __future__ import annotations

import enum
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .assets import AssetCatalog, DebrisAsset, select_asset
from .geometry import Box, horizon_row, project_cuboid_bbox
from .randomizer import Exhausted, PlacementSample, RandomizationConfig, derive_seed, sample_placement
from .scene import GtObject, SceneRecord

PROTECTED_CLASSES = ("pedestrian", "bike")


class RejectReason(str, enum.Enum):
    OFF_ROAD = "off_road"
    IN_SKY = "in_sky"
    IMPLAUSIBLE_OCCLUSION = "implausible_occlusion"
    TOO_SMALL = "too_small"
    TOO_FAR = "too_far"
    OVERLAP_FORBIDDEN = "overlap_forbidden"


def _overlaps(a: Box, b: Box) -> bool:
    return min(a[2], b[2]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[1], b[1])


def check_semantic(record: SceneRecord, bbox: Box,
                   objects: Optional[Sequence[GtObject]] = None) -> Optional[RejectReason]:
    """Decide whether a debris box is a plausible placement in ``record``.

    Args:
        record: the scene being augmented.
        bbox: candidate debris box in pixels.
        objects: labelled objects the candidate must respect; defaults to the
            record's own ground truth. Pass a longer list to include debris
            accepted earlier in the same image.

    Returns:
        ``None`` if accepted, otherwise the first violated :class:`RejectReason`.
    """
    objects = record.gt_objects if objects is None else objects
    x0, _, x1, y1 = bbox
    if not y1 > horizon_row(record.camera):
        return RejectReason.IN_SKY
    if not record.lanes.contains((x0 + x1) / 2.0, y1):
        return RejectReason.OFF_ROAD
    hits = [gt for gt in objects if _overlaps(bbox, gt.bbox)]
    if any(gt.category in PROTECTED_CLASSES for gt in hits):
        return RejectReason.OVERLAP_FORBIDDEN
    # overlap is only plausible when the debris stands nearer, i.e. lower in the image
    if any(not y1 > gt.bbox[3] for gt in hits):
        return RejectReason.IMPLAUSIBLE_OCCLUSION
    return None


def scene_fog_color(image: np.ndarray) -> np.ndarray:
    """Mean colour of the top 10% of rows, used as the haze colour."""
    rows = max(1, int(round(image.shape[0] * 0.1)))
    return image[:rows].reshape(-1, image.shape[2]).astype(np.float64).mean(axis=0)


def _pixel_region(bbox: Box, shape: Tuple[int, ...]) -> Tuple[int, int, int, int]:
    height, width = shape[:2]
    x_min, y_min, x_max, y_max = bbox
    if not (x_max > x_min and y_max > y_min):
        raise ValueError(f"degenerate bbox {bbox}")
    if x_min < 0 or y_min < 0 or x_max > width or y_max > height:
        raise ValueError(f"bbox {bbox} outside {width}x{height} image")
    x0 = min(int(round(x_min)), width - 1)
    y0 = min(int(round(y_min)), height - 1)
    x1 = max(x0 + 1, min(int(round(x_max)), width))
    y1 = max(y0 + 1, min(int(round(y_max)), height))
    return x0, y0, x1, y1


def render_sprite(asset: DebrisAsset, size: Tuple[int, int], angle: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rotate the sprite in-plane by ``angle`` radians, then resample to ``size`` (w, h)."""
    sprite = Image.fromarray(asset.sprite, "RGB")
    mask = Image.fromarray(asset.mask.astype(np.uint8) * 255, "L")
    degrees = math.degrees(angle)
    if degrees % 360.0 != 0.0:
        sprite = sprite.rotate(degrees, resample=Image.BILINEAR)
        mask = mask.rotate(degrees, resample=Image.BILINEAR)
    sprite = sprite.resize(size, resample=Image.BILINEAR)
    mask = mask.resize(size, resample=Image.BILINEAR)
    return np.asarray(sprite), np.asarray(mask) >= 128


def composite(image: np.ndarray, asset: DebrisAsset, bbox: Box, sample: PlacementSample,
              fog_color: Optional[np.ndarray] = None) -> np.ndarray:
    """Paste one randomized sprite into a copy of ``image``.

    Colour gains are applied and clamped first, then the result is blended
    towards ``fog_color`` with transmission ``exp(-fog_beta * forward)``.
    Pixels outside the resampled mask are left untouched.
    """
    if fog_color is None:
        fog_color = scene_fog_color(image)
    x0, y0, x1, y1 = _pixel_region(bbox, image.shape)
    sprite, mask = render_sprite(asset, (x1 - x0, y1 - y0), sample.pose.yaw - asset.native_yaw)

    px = np.clip(sprite.astype(np.float64) * np.asarray(sample.gains, dtype=np.float64), 0.0, 255.0)
    t = 1.0 - math.exp(-sample.fog_beta * sample.pose.forward)
    px = t * np.asarray(fog_color, dtype=np.float64) + (1.0 - t) * px
    px = np.clip(np.rint(px), 0, 255).astype(np.uint8)

    out = image.copy()
    region = out[y0:y1, x0:x1]
    region[mask] = px[mask]
    return out


@dataclass
class AugmentationResult:
    image: np.ndarray
    added_labels: List[GtObject] = field(default_factory=list)
    provenance: List[dict] = field(default_factory=list)
    paint_order: List[int] = field(default_factory=list)


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def augment_record(record: SceneRecord, catalog: AssetCatalog, config: RandomizationConfig,
                   n_objects: int, dataset_seed: int, image: Optional[np.ndarray] = None,
                   asset_weights: Optional[Mapping[str, float]] = None) -> AugmentationResult:
    """Try to add ``n_objects`` debris sprites to one scene.

    Object ``i`` draws from its own generator seeded with
    ``derive_seed(dataset_seed, record.id, i)``. Accepted objects join the
    occluder list for later candidates and are painted far-to-near.
    """
    if n_objects < 1:
        raise ValueError(f"n_objects must be >= 1, got {n_objects}")
    if image is None:
        image = load_rgb(record.image_path)
    fog = scene_fog_color(image)
    size = (record.width, record.height)

    objects = list(record.gt_objects)
    accepted = []  # (index, asset, bbox, sample)
    provenance = []
    for i in range(n_objects):
        seed = derive_seed(dataset_seed, record.id, i)
        rng = np.random.default_rng(seed)
        asset, matched = select_asset(catalog, record.env, rng, asset_weights)
        entry = {"index": i, "seed": seed, "asset_id": asset.asset_id, "env_matched": matched}
        sample = sample_placement(config, record.camera, record.lanes, asset, rng, size, seed)
        if isinstance(sample, Exhausted):
            entry.update(accepted=False, reject_reason=RejectReason(sample.reason).value,
                         sample=None, bbox=None, attempts=sample.attempts)
            provenance.append(entry)
            continue
        bbox = project_cuboid_bbox(record.camera, sample.pose, asset.dims, size)
        reason = check_semantic(record, bbox, objects)
        entry.update(sample=sample.to_dict(), bbox=list(bbox))
        if reason is None:
            entry.update(accepted=True, reject_reason=None)
            accepted.append((i, asset, bbox, sample))
            objects.append(GtObject(bbox=bbox, category="debris", distance_m=sample.pose.forward,
                                    size_3d=tuple(asset.dims)))
        else:
            entry.update(accepted=False, reject_reason=reason.value)
        provenance.append(entry)

    out = image
    order = sorted(accepted, key=lambda a: (-a[3].pose.forward, a[0]))
    for _, asset, bbox, sample in order:
        out = composite(out, asset, bbox, sample, fog)
    if out is image:
        out = image.copy()
    labels = [GtObject(bbox=b, category="debris", distance_m=s.pose.forward, size_3d=tuple(a.dims))
              for _, a, b, s in accepted]
    return AugmentationResult(image=out, added_labels=labels, provenance=provenance,
                              paint_order=[a[0] for a in order])


def _atomic_write(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_result(result: AugmentationResult, record: SceneRecord, out_dir,
                 header: Optional[dict] = None) -> SceneRecord:
    """Write image, labels and provenance for one record; return the augmented record.

    Layout: ``images/<id>.png``, ``labels/<id>.json``, ``provenance/<id>.json``.
    Each file is written to a temporary name and renamed into place.
    """
    out_dir = os.fspath(out_dir)
    header = dict(header or {})
    for sub in ("images", "labels", "provenance"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    image_path = os.path.join(out_dir, "images", f"{record.id}.png")
    info = PngInfo()
    info.add_text("debrisaug", json.dumps(header, sort_keys=True))
    buf = io.BytesIO()
    Image.fromarray(result.image, "RGB").save(buf, format="PNG", pnginfo=info)
    _atomic_write(image_path, buf.getvalue())

    objects = [dict(g.to_dict(), source="human") for g in record.gt_objects]
    objects += [dict(g.to_dict(), source="synthetic") for g in result.added_labels]
    _atomic_write(os.path.join(out_dir, "labels", f"{record.id}.json"),
                  _json_bytes({"header": header, "id": record.id, "objects": objects}))
    _atomic_write(os.path.join(out_dir, "provenance", f"{record.id}.json"),
                  _json_bytes({"header": header, "id": record.id, "attempts": result.provenance}))

    return SceneRecord(
        id=record.id,
        image_path=os.path.abspath(image_path),
        width=record.width,
        height=record.height,
        camera=record.camera,
        gt_objects=tuple(record.gt_objects) + tuple(result.added_labels),
        lanes=record.lanes,
        env=record.env,
    )
