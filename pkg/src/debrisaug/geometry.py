"""Flat-ground pinhole camera model.

World frame: origin at the ground point directly below the camera, axes
(lateral, forward, up) with lateral positive to the right. The camera sits
at height ``cam_height`` and is pitched down by ``pitch`` radians. Image
coordinates follow the usual convention: ``u`` grows right, ``v`` grows down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class CameraCalib:
    fx: float
    fy: float
    cx: float
    cy: float
    cam_height: float
    pitch: float = 0.0  # radians, downward positive

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not self.cam_height > 0:
            raise ValueError(f"cam_height must be positive, got {self.cam_height}")
        if not abs(self.pitch) < math.pi / 2:
            raise ValueError(f"|pitch| must be < pi/2, got {self.pitch}")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "cam_height": self.cam_height,
            "pitch": self.pitch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraCalib":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            cam_height=float(d["cam_height"]),
            pitch=float(d.get("pitch", 0.0)),
        )


@dataclass(frozen=True)
class GroundPose:
    forward: float
    lateral: float = 0.0
    yaw: float = 0.0
    obj_pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        if not self.forward > 0:
            raise ValueError(f"forward must be positive, got {self.forward}")

    def to_dict(self) -> dict:
        return {
            "forward": self.forward,
            "lateral": self.lateral,
            "yaw": self.yaw,
            "obj_pitch": self.obj_pitch,
            "roll": self.roll,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundPose":
        return cls(**{k: float(d[k]) for k in ("forward", "lateral", "yaw", "obj_pitch", "roll")})


def _to_camera(calib: CameraCalib, points: np.ndarray) -> np.ndarray:
    """World (lateral, forward, up) points, shape (N, 3) -> camera (x, y, z)."""
    s, c = math.sin(calib.pitch), math.cos(calib.pitch)
    lat = points[:, 0]
    fwd = points[:, 1]
    dz = points[:, 2] - calib.cam_height
    x = lat
    y = -fwd * s - dz * c
    z = fwd * c - dz * s
    return np.stack([x, y, z], axis=1)


def project_points(calib: CameraCalib, points) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projection.

    Returns:
        ``(uv, in_front)`` where ``uv`` has shape (N, 2) (NaN for points at or
        behind the camera) and ``in_front`` is the boolean depth mask.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = _to_camera(calib, pts)
    in_front = cam[:, 2] > 0
    uv = np.full((len(pts), 2), np.nan)
    z = cam[in_front, 2]
    uv[in_front, 0] = calib.cx + calib.fx * cam[in_front, 0] / z
    uv[in_front, 1] = calib.cy + calib.fy * cam[in_front, 1] / z
    return uv, in_front


def ground_to_image(calib: CameraCalib, forward: float, lateral: float,
                    up: float = 0.0) -> Optional[Tuple[float, float]]:
    """Project one world point to pixels; ``None`` when it is not in front of the camera."""
    uv, ok = project_points(calib, [[lateral, forward, up]])
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def horizon_row(calib: CameraCalib) -> float:
    """Image row of the vanishing line of the ground plane."""
    return calib.cy - calib.fy * math.tan(calib.pitch)


def ground_depth(calib: CameraCalib, forward: float) -> float:
    """Camera-frame depth of any ground point at the given forward distance."""
    return forward * math.cos(calib.pitch) + calib.cam_height * math.sin(calib.pitch)


def ground_row(calib: CameraCalib, forward: float) -> float:
    """Image row where the ground at ``forward`` metres projects (independent of lateral)."""
    s, c = math.sin(calib.pitch), math.cos(calib.pitch)
    h = calib.cam_height
    return calib.cy + calib.fy * (h * c - forward * s) / (forward * c + h * s)


def pixel_to_lateral(calib: CameraCalib, u: float, forward: float) -> float:
    """Invert the ground projection along a row: column ``u`` at ``forward`` -> lateral metres."""
    return (u - calib.cx) * ground_depth(calib, forward) / calib.fx


def _rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy_, sy_ = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    # yaw about up, pitch about lateral, roll about forward
    rz = np.array([[cy_, -sy_, 0.0], [sy_, cy_, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[cr, 0.0, sr], [0.0, 1.0, 0.0], [-sr, 0.0, cr]])
    return rz @ rx @ ry


def cuboid_corners(pose: GroundPose, dims: Sequence[float]) -> np.ndarray:
    """World coordinates of the 8 corners of a cuboid resting at ``pose``.

    ``dims`` is (length, width, height): length along the object's forward
    axis, width along its lateral axis. Rotations are applied about the
    centre of the base.
    """
    l, w, h = (float(d) for d in dims)
    local = np.array([[sx * w / 2, sy * l / 2, z]
                      for sx in (-1, 1) for sy in (-1, 1) for z in (0.0, h)])
    rot = _rotation(pose.yaw, pose.obj_pitch, pose.roll)
    return local @ rot.T + np.array([pose.lateral, pose.forward, 0.0])


def project_cuboid_bbox(calib: CameraCalib, pose: GroundPose, dims: Sequence[float],
                        image_size: Optional[Tuple[int, int]] = None) -> Optional[Box]:
    """Axis-aligned pixel box of a projected cuboid.

    Args:
        calib: camera calibration.
        pose: base-centre pose on the ground.
        dims: (length, width, height) in metres, all positive.
        image_size: (width, height); when given the box is clipped to the image.

    Returns:
        ``(x_min, y_min, x_max, y_max)``, or ``None`` if any corner is behind
        the camera or the clipped box is empty.
    """
    if min(dims) <= 0:
        raise ValueError(f"cuboid dims must be positive, got {tuple(dims)}")
    uv, ok = project_points(calib, cuboid_corners(pose, dims))
    if not ok.all():
        return None
    x0, y0 = uv.min(axis=0)
    x1, y1 = uv.max(axis=0)
    if image_size is not None:
        width, height = image_size
        x0, x1 = max(x0, 0.0), min(x1, float(width))
        y0, y1 = max(y0, 0.0), min(y1, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
    return float(x0), float(y0), float(x1), float(y1)
