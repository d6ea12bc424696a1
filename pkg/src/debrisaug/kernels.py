"""Grid-head numerics: target encoding, losses, decoding, IoU and NMS.

Grids are stored as float32 arrays of shape ``(H_g, W_g, 5)`` indexed
``[y, x, channel]``. Channel 0 is confidence; channels 1-4 are the box
centre and half-extent normalised by the image size:
``(x_c / W, y_c / H, w / 2W, h / 2H)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .geometry import Box

GRID_MAGIC = b"HZGD"
DEFAULT_GRID = (120, 68)
DEFAULT_IMAGE = (960, 544)
DEFAULT_EPSILON = 1e-7


@dataclass
class DetectionGrid:
    cells: np.ndarray
    collisions: int = 0

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.float32)
        if cells.ndim != 3 or cells.shape[2] != 5:
            raise ValueError(f"grid must have shape (H_g, W_g, 5), got {cells.shape}")
        self.cells = cells

    @classmethod
    def zeros(cls, grid_dims: Tuple[int, int] = DEFAULT_GRID) -> "DetectionGrid":
        wg, hg = grid_dims
        return cls(np.zeros((hg, wg, 5), dtype=np.float32))

    @property
    def grid_dims(self) -> Tuple[int, int]:
        return self.cells.shape[1], self.cells.shape[0]

    @property
    def confidence(self) -> np.ndarray:
        return self.cells[..., 0]

    @property
    def boxes(self) -> np.ndarray:
        return self.cells[..., 1:]


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0 < self.epsilon < 1e-3:
            raise ValueError(f"epsilon must lie in (0, 1e-3), got {self.epsilon}")


@dataclass(frozen=True)
class Detection:
    bbox: Box
    confidence: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 <= x1 and y0 <= y1):
            raise ValueError(f"invalid bbox {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def area(self) -> float:
        return box_area(self.bbox)


def box_area(b: Box) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def cell_of(x: float, y: float, image_dims: Tuple[int, int], grid_dims: Tuple[int, int]) -> Tuple[int, int]:
    """Grid cell (column, row) containing image point (x, y)."""
    width, height = image_dims
    wg, hg = grid_dims
    col = min(int(math.floor(x * wg / width)), wg - 1)
    row = min(int(math.floor(y * hg / height)), hg - 1)
    return col, row


def encode_targets(boxes: Iterable[Box], image_dims: Tuple[int, int] = DEFAULT_IMAGE,
                   grid_dims: Tuple[int, int] = DEFAULT_GRID) -> DetectionGrid:
    """Build the training target grid for a set of pixel boxes.

    Each box lights the single cell containing its centre. When two boxes
    share a cell the later one wins and ``grid.collisions`` is incremented.
    """
    width, height = image_dims
    grid = DetectionGrid.zeros(grid_dims)
    for b in boxes:
        x0, y0, x1, y1 = (float(v) for v in b)
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height or x0 >= x1 or y0 >= y1:
            raise ValueError(f"box {tuple(b)} is not a valid box inside {width}x{height}")
        xc, yc = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        col, row = cell_of(xc, yc, image_dims, grid_dims)
        if grid.cells[row, col, 0] == 1.0:
            grid.collisions += 1
        grid.cells[row, col] = (1.0, xc / width, yc / height,
                                (x1 - x0) / (2.0 * width), (y1 - y0) / (2.0 * height))
    return grid


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def bce_loss(target, pred, cfg: LossConfig = LossConfig()) -> float:
    """Mean binary cross-entropy with ``eps`` inside both logarithms.

    ``-[t log(p + eps) + (1 - t) log(1 - p + eps)]`` averaged over cells;
    finite for every ``p`` in [0, 1].
    """
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    _check_shapes(t, p)
    eps = cfg.epsilon
    per_cell = -(t * np.log(p + eps) + (1.0 - t) * np.log(1.0 - p + eps))
    return float(per_cell.mean())


def bce_grad(target, pred, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Analytic gradient of :func:`bce_loss` with respect to ``pred``."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    _check_shapes(t, p)
    eps = cfg.epsilon
    return (-(t / (p + eps)) + (1.0 - t) / (1.0 - p + eps)) / t.size


def l1_loss(target, pred, mask) -> float:
    """Box loss: L1 distance summed over positive cells, divided by max(1, #positives).

    ``target``/``pred`` have shape (..., 4); ``mask`` is the target confidence.
    """
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    _check_shapes(t, p)
    m = np.asarray(mask, dtype=np.float64) == 1.0
    if m.shape != t.shape[:-1]:
        raise ValueError(f"mask shape {m.shape} does not match boxes {t.shape}")
    total = np.abs(t[m] - p[m]).sum()
    return float(total / max(1, int(m.sum())))


def l1_grad(target, pred, mask) -> np.ndarray:
    """Subgradient of :func:`l1_loss` (zero at kinks and on negative cells)."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64) == 1.0
    g = np.sign(p - t) * m[..., None]
    return g / max(1, int(m.sum()))


def grid_losses(target: DetectionGrid, pred: DetectionGrid, cfg: LossConfig = LossConfig()) -> dict:
    return {
        "bce": bce_loss(target.confidence, pred.confidence, cfg),
        "l1": l1_loss(target.boxes, pred.boxes, target.confidence),
    }


def decode_grid(pred: DetectionGrid, image_dims: Tuple[int, int] = DEFAULT_IMAGE,
                conf_threshold: float = 0.5) -> List[Detection]:
    """Turn every cell with confidence >= ``conf_threshold`` into a pixel detection.

    Output is sorted by descending confidence, ties in row-major cell order.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"threshold {conf_threshold} outside [0, 1]")
    width, height = image_dims
    conf = pred.confidence
    rows, cols = np.nonzero(conf >= conf_threshold)
    dets = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        _, xn, yn, wn, hn = (float(v) for v in pred.cells[r, c])
        xc, yc = xn * width, yn * height
        hw, hh = wn * width, hn * height
        box = (xc - hw, yc - hh, xc + hw, yc + hh)
        p = min(1.0, max(0.0, float(conf[r, c])))
        dets.append(Detection(bbox=box, confidence=p))
    dets.sort(key=lambda d: -d.confidence)
    return dets


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return float(inter / union) if union > 0 else 0.0


def nms_order_key(d: Detection):
    """Total processing order: confidence desc, then area asc, then bbox lexicographic."""
    return (-d.confidence, d.area, tuple(d.bbox))


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> List[Detection]:
    """Greedy non-maximum suppression."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside (0, 1]")
    remaining = sorted(dets, key=nms_order_key)
    kept: List[Detection] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [d for d in remaining if iou(best.bbox, d.bbox) < iou_threshold]
    return kept


def write_grid(grid: DetectionGrid, path) -> None:
    """Serialise as ``HZGD`` + little-endian u32 (W_g, H_g, C) + float32 [y, x, c] data."""
    hg, wg, c = grid.cells.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<III", wg, hg, c))
        fh.write(np.ascontiguousarray(grid.cells, dtype="<f4").tobytes())


def read_grid(path) -> DetectionGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid file (bad magic)")
    wg, hg, c = struct.unpack("<III", raw[4:16])
    if c != 5:
        raise ValueError(f"{path}: expected 5 channels, got {c}")
    expected = wg * hg * c * 4
    if len(raw) - 16 != expected:
        raise ValueError(f"{path}: payload is {len(raw) - 16} bytes, expected {expected}")
    cells = np.frombuffer(raw, dtype="<f4", offset=16).reshape(hg, wg, c).astype(np.float32)
    return DetectionGrid(cells)


def detection_to_json(image_id: str, det: Detection) -> str:
    return json.dumps({"image_id": image_id, "bbox": list(det.bbox), "confidence": det.confidence})


def write_detections(path, items: Iterable[Tuple[str, Detection]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, det in items:
            fh.write(detection_to_json(image_id, det) + "\n")


def read_detections(path) -> List[Tuple[str, Detection]]:
    """Parse a detections JSONL file into ``(image_id, Detection)`` pairs."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append((str(d["image_id"]),
                            Detection(bbox=tuple(float(v) for v in d["bbox"]),
                                      confidence=float(d["confidence"]))))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection ({exc})") from exc
    return out


def rasterize_detections(dets: Iterable[Detection], image_dims: Tuple[int, int] = DEFAULT_IMAGE,
                         grid_dims: Tuple[int, int] = DEFAULT_GRID) -> DetectionGrid:
    """Prediction grid from detections: each centre cell takes its highest confidence.

    Box channels hold the highest-confidence box; inverse of :func:`decode_grid`
    up to NMS.
    """
    width, height = image_dims
    grid = DetectionGrid.zeros(grid_dims)
    for d in dets:
        x0, y0, x1, y1 = d.bbox
        xc = min(max((x0 + x1) / 2.0, 0.0), float(width))
        yc = min(max((y0 + y1) / 2.0, 0.0), float(height))
        col, row = cell_of(xc, yc, image_dims, grid_dims)
        if d.confidence >= grid.cells[row, col, 0]:
            grid.cells[row, col] = (d.confidence, xc / width, yc / height,
                                    (x1 - x0) / (2.0 * width), (y1 - y0) / (2.0 * height))
    return grid
