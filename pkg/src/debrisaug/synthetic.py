"""Procedural demo data: road scenes with lanes and a small sprite catalog.

Real use starts from recorded drives and simulator renders; this module
only exists so the pipeline can be exercised end to end without them.
"""

from __future__ import annotations

import math
import os
from typing import List, Optional

import numpy as np
from PIL import Image, ImageDraw

from .assets import AssetCatalog, DebrisAsset, save_catalog
from .geometry import CameraCalib, GroundPose, ground_to_image, project_cuboid_bbox
from .scene import EnvTags, GtObject, LaneSet, SceneRecord, save_manifest

DEMO_SIZE = (960, 544)
LANE_WIDTH_M = 3.6

_ENVS = [
    EnvTags("highway", "day", "clear", "low"),
    EnvTags("highway", "day", "clear", "med"),
    EnvTags("urban", "day", "cloud", "high"),
    EnvTags("rural", "night", "clear", "low"),
    EnvTags("freeway", "dawn_dusk", "rain", "med"),
]

_SKY = {"day": (150, 185, 225), "night": (18, 22, 40), "dawn_dusk": (205, 140, 110),
        "sunset_sunrise": (230, 150, 90)}


def demo_calib(pitch: float = 0.02) -> CameraCalib:
    width, height = DEMO_SIZE
    return CameraCalib(fx=1000.0, fy=1000.0, cx=width / 2, cy=height / 2, cam_height=1.5, pitch=pitch)


def _lane_polygon(calib: CameraCalib, left_m: float, right_m: float, near: float, far: float):
    pts = [ground_to_image(calib, near, left_m), ground_to_image(calib, far, left_m),
           ground_to_image(calib, far, right_m), ground_to_image(calib, near, right_m)]
    return tuple((round(u, 3), round(v, 3)) for u, v in pts)


def demo_lanes(calib: CameraCalib, near: float = 4.0, far: float = 400.0) -> LaneSet:
    half = LANE_WIDTH_M / 2
    return LaneSet(
        ego=_lane_polygon(calib, -half, half, near, far),
        left=_lane_polygon(calib, -3 * half, -half, near, far),
        right=_lane_polygon(calib, half, 3 * half, near, far),
    )


def _clip_box(box, size):
    w, h = size
    return (max(0.0, box[0]), max(0.0, box[1]), min(float(w), box[2]), min(float(h), box[3]))


def render_scene(calib: CameraCalib, lanes: LaneSet, env: EnvTags, gts: List[GtObject],
                 rng: np.random.Generator) -> np.ndarray:
    width, height = DEMO_SIZE
    img = Image.new("RGB", DEMO_SIZE, _SKY[env.time_of_day])
    draw = ImageDraw.Draw(img)
    horizon = calib.cy - calib.fy * math.tan(calib.pitch)
    dark = env.time_of_day == "night"
    draw.rectangle([0, horizon, width, height], fill=(40, 60, 35) if not dark else (12, 16, 12))
    road = (95, 95, 98) if not dark else (35, 35, 38)
    for poly in lanes.polygons():
        draw.polygon(poly, fill=road)
    for x in (-1.5, -0.5, 0.5, 1.5):
        draw.line([ground_to_image(calib, 4.0, x * LANE_WIDTH_M), ground_to_image(calib, 400.0, x * LANE_WIDTH_M)],
                  fill=(220, 220, 210), width=2)
    for g in gts:
        shade = (160, 40, 40) if g.category == "vehicle" else (60, 60, 160)
        draw.rectangle(list(g.bbox), fill=shade)
    arr = np.asarray(img).astype(np.int16)
    noise = rng.integers(-6, 7, size=arr.shape, dtype=np.int16)
    return np.clip(arr + noise, 0, 255).astype(np.uint8)


def make_scene_records(out_dir: str, n_images: int, seed: int = 0) -> List[SceneRecord]:
    """Write ``n_images`` demo scenes plus ``manifest.jsonl`` under ``out_dir``."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        calib = demo_calib(pitch=0.02)
        lanes = demo_lanes(calib)
        env = _ENVS[i % len(_ENVS)]
        gts = []
        # a vehicle in a neighbouring lane
        side = -1 if i % 2 == 0 else 1
        truck = GroundPose(forward=float(rng.uniform(20, 60)), lateral=side * LANE_WIDTH_M)
        box = project_cuboid_bbox(calib, truck, (8.0, 2.5, 3.2), DEMO_SIZE)
        if box is not None:
            gts.append(GtObject(bbox=_clip_box(box, DEMO_SIZE), category="vehicle", distance_m=truck.forward,
                                size_3d=(8.0, 2.5, 3.2)))
        if i % 3 == 0:
            ped = GroundPose(forward=float(rng.uniform(15, 30)), lateral=-side * 2.6 * LANE_WIDTH_M / 2)
            box = project_cuboid_bbox(calib, ped, (0.4, 0.5, 1.7), DEMO_SIZE)
            if box is not None:
                gts.append(GtObject(bbox=_clip_box(box, DEMO_SIZE), category="pedestrian",
                                    distance_m=ped.forward, size_3d=(0.4, 0.5, 1.7)))
        image = render_scene(calib, lanes, env, gts, rng)
        rid = f"scene_{i:04d}"
        path = os.path.join(out_dir, "images", f"{rid}.png")
        Image.fromarray(image, "RGB").save(path)
        records.append(SceneRecord(id=rid, image_path=os.path.abspath(path), width=DEMO_SIZE[0],
                                   height=DEMO_SIZE[1], camera=calib, gt_objects=tuple(gts),
                                   lanes=lanes, env=env))
    save_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
    return records


def _sprite(shape: str, color, size=(64, 64)):
    img = Image.new("RGB", size, (0, 0, 0))
    mask = Image.new("L", size, 0)
    w, h = size
    for target, fill in ((img, color), (mask, 255)):
        d = ImageDraw.Draw(target)
        if shape == "rect":
            d.rectangle([4, 8, w - 5, h - 5], fill=fill)
        elif shape == "ellipse":
            d.ellipse([3, 10, w - 4, h - 4], fill=fill)
        elif shape == "triangle":
            d.polygon([(w // 2, 2), (w - 6, h - 3), (5, h - 3)], fill=fill)
        elif shape == "ring":
            d.ellipse([2, 2, w - 3, h - 3], fill=fill)
    if shape == "ring":
        ImageDraw.Draw(img).ellipse([w // 3, h // 3, 2 * w // 3, 2 * h // 3], fill=(90, 90, 90))
    sprite = np.asarray(img).copy()
    # texture so resampling is not trivially flat
    sprite[::4, :, :] = (sprite[::4, :, :] * 0.8).astype(np.uint8)
    return sprite, np.asarray(mask) >= 128


_DEMO_ASSETS = [
    ("box_01", "box", "rect", (170, 120, 70), (0.5, 0.5, 0.4), "day", "clear"),
    ("tire_01", "tire", "ring", (25, 25, 25), (0.7, 0.25, 0.7), "day", "clear"),
    ("cone_01", "cone", "triangle", (240, 110, 20), (0.35, 0.35, 0.7), "day", "clear"),
    ("rock_01", "rock", "ellipse", (120, 115, 105), (0.4, 0.35, 0.25), "day", "cloud"),
    ("pallet_01", "pallet", "rect", (180, 150, 100), (1.2, 1.0, 0.15), "day", "clear"),
    ("barrel_01", "barrel", "rect", (30, 90, 160), (0.6, 0.6, 0.9), "night", "clear"),
    ("mattress_01", "mattress", "rect", (230, 230, 220), (2.0, 1.5, 0.25), "dawn_dusk", "rain"),
]


def make_catalog(out_dir: Optional[str] = None) -> AssetCatalog:
    """Build the demo asset catalog; also write it to ``out_dir`` when given."""
    assets = []
    for aid, cls, shape, color, dims, tod, weather in _DEMO_ASSETS:
        sprite, mask = _sprite(shape, color)
        assets.append(DebrisAsset(asset_id=aid, class_name=cls, sprite=sprite, mask=mask, dims=dims,
                                  native_yaw=0.0, time_of_day=tod, weather=weather))
    catalog = AssetCatalog(assets)
    if out_dir is not None:
        save_catalog(catalog, out_dir)
    return catalog


def make_demo_dataset(out_dir: str, n_images: int = 10, seed: int = 0) -> dict:
    """Scenes under ``out_dir/scenes`` and a catalog under ``out_dir/catalog``."""
    scenes = os.path.join(out_dir, "scenes")
    catalog = os.path.join(out_dir, "catalog")
    make_scene_records(scenes, n_images, seed)
    make_catalog(catalog)
    return {"manifest": os.path.join(scenes, "manifest.jsonl"), "catalog": catalog}
