"""Pre-rendered debris sprites with masks and physical metadata.

On disk a catalog is a directory of per-asset subdirectories, each holding
``sprite.png`` (RGB), ``mask.png`` (8-bit grayscale, 255 = object) and
``meta.json``.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from PIL import Image

from .scene import TIMES_OF_DAY, WEATHERS, EnvTags

MAX_DIM_M = 20.0
META_KEYS = ("asset_id", "class_name", "dims_m", "native_yaw", "time_of_day", "weather")


class AssetError(ValueError):
    """Raised when catalog assets are unreadable or violate their invariants."""


@dataclass(frozen=True, eq=False)
class DebrisAsset:
    asset_id: str
    class_name: str
    sprite: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool
    dims: Tuple[float, float, float]
    native_yaw: float = 0.0
    time_of_day: str = "day"
    weather: str = "clear"

    def __post_init__(self):
        problems = validate_asset(self)
        if problems:
            raise AssetError(f"asset {self.asset_id!r}: " + "; ".join(problems))

    @property
    def env_key(self) -> Tuple[str, str]:
        return (self.time_of_day, self.weather)

    @property
    def volume(self) -> float:
        l, w, h = self.dims
        return l * w * h

    def meta(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "class_name": self.class_name,
            "dims_m": list(self.dims),
            "native_yaw": self.native_yaw,
            "time_of_day": self.time_of_day,
            "weather": self.weather,
        }


def validate_asset(asset: DebrisAsset) -> List[str]:
    problems = []
    if asset.sprite.ndim != 3 or asset.sprite.shape[2] != 3:
        problems.append(f"sprite must be RGB, got shape {asset.sprite.shape}")
    elif asset.mask.shape != asset.sprite.shape[:2]:
        problems.append(f"mask size {asset.mask.shape[::-1]} != sprite size {asset.sprite.shape[1::-1]}")
    if not asset.mask.any():
        problems.append("empty mask")
    if len(asset.dims) != 3 or not all(0 < d <= MAX_DIM_M for d in asset.dims):
        problems.append(f"dims {asset.dims} outside (0, {MAX_DIM_M}] m")
    if asset.time_of_day not in TIMES_OF_DAY:
        problems.append(f"invalid time_of_day {asset.time_of_day!r}")
    if asset.weather not in WEATHERS:
        problems.append(f"invalid weather {asset.weather!r}")
    return problems


@dataclass
class AssetCatalog:
    assets: List[DebrisAsset]
    by_env: Dict[Tuple[str, str], List[str]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [a.asset_id for a in self.assets]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise AssetError(f"duplicate asset ids: {dupes}")
        index = defaultdict(list)
        for a in self.assets:
            index[a.env_key].append(a.asset_id)
        self.by_env = dict(index)
        self._by_id = {a.asset_id: a for a in self.assets}

    def __len__(self) -> int:
        return len(self.assets)

    def __getitem__(self, asset_id: str) -> DebrisAsset:
        return self._by_id[asset_id]

    def __contains__(self, asset_id) -> bool:
        return asset_id in self._by_id


def _meta_bytes(meta: dict) -> bytes:
    return (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _read_asset(path: str) -> DebrisAsset:
    name = os.path.basename(path)
    try:
        with open(os.path.join(path, "meta.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise AssetError(f"asset {name!r}: unreadable meta.json ({exc})") from exc
    asset_id = str(meta.get("asset_id", name))
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise AssetError(f"asset {asset_id!r}: meta.json missing keys {missing}")
    try:
        with Image.open(os.path.join(path, "sprite.png")) as im:
            sprite = np.asarray(im.convert("RGB"), dtype=np.uint8)
        with Image.open(os.path.join(path, "mask.png")) as im:
            mask = np.asarray(im.convert("L")) >= 128
    except OSError as exc:
        raise AssetError(f"asset {asset_id!r}: unreadable image ({exc})") from exc
    return DebrisAsset(
        asset_id=asset_id,
        class_name=str(meta["class_name"]),
        sprite=sprite,
        mask=mask,
        dims=tuple(float(v) for v in meta["dims_m"]),
        native_yaw=float(meta["native_yaw"]),
        time_of_day=meta["time_of_day"],
        weather=meta["weather"],
    )


def load_catalog(directory) -> AssetCatalog:
    """Load every asset subdirectory of ``directory``.

    All invalid assets are reported together in one :class:`AssetError`.
    """
    directory = os.fspath(directory)
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"catalog directory not found: {directory}")
    assets, errors = [], []
    for name in sorted(os.listdir(directory)):
        sub = os.path.join(directory, name)
        if not os.path.isdir(sub):
            continue
        try:
            assets.append(_read_asset(sub))
        except AssetError as exc:
            errors.append(str(exc))
    if errors:
        raise AssetError("rejected assets:\n  " + "\n  ".join(errors))
    return AssetCatalog(assets)


def save_asset(asset: DebrisAsset, directory) -> str:
    """Write one asset as ``directory/<asset_id>/{sprite,mask}.png + meta.json``."""
    path = os.path.join(os.fspath(directory), asset.asset_id)
    os.makedirs(path, exist_ok=True)
    Image.fromarray(asset.sprite, "RGB").save(os.path.join(path, "sprite.png"))
    Image.fromarray(asset.mask.astype(np.uint8) * 255, "L").save(os.path.join(path, "mask.png"))
    with open(os.path.join(path, "meta.json"), "wb") as fh:
        fh.write(_meta_bytes(asset.meta()))
    return path


def save_catalog(catalog: AssetCatalog, directory) -> None:
    for asset in catalog.assets:
        save_asset(asset, directory)


def select_asset(catalog: AssetCatalog, env: EnvTags, rng: np.random.Generator,
                 weights: Optional[Mapping[str, float]] = None) -> Tuple[DebrisAsset, bool]:
    """Draw an asset whose lighting conditions match ``env``.

    Candidates are the assets tagged with the same (time_of_day, weather).
    If there are none the draw falls back to the whole catalog and the
    second return value is ``False``.

    ``weights`` optionally maps asset ids to relative sampling weights
    (missing ids weigh 1); the default is a uniform draw.
    """
    if not len(catalog):
        raise AssetError("cannot select from an empty catalog")
    ids = catalog.by_env.get((env.time_of_day, env.weather))
    matched = bool(ids)
    if not matched:
        ids = [a.asset_id for a in catalog.assets]
    if weights is None:
        idx = int(rng.integers(len(ids)))
    else:
        w = np.array([float(weights.get(i, 1.0)) for i in ids])
        if not (np.all(w >= 0) and w.sum() > 0):
            raise ValueError("asset weights must be non-negative with a positive sum")
        idx = int(rng.choice(len(ids), p=w / w.sum()))
    return catalog[ids[idx]], matched
