"""Detector evaluation: IoU matching, size-bucketed AP, ROC/FPR, threshold choice, failure mining.

Only ``debris`` ground truth is scored. Boxes shorter than 8 px are outside
every size bucket and are ignored: they are neither matchable nor missed.
"""

from __future__ import annotations

import enum
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .assets import AssetCatalog
from .geometry import Box
from .kernels import Detection, DetectionGrid, iou
from .scene import EnvTags, GtObject

MIN_SCORABLE_HEIGHT = 8.0
WEIGHTING_MODES = ("per_bucket", "per_instance")


class SizeBucket(str, enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"

    @property
    def bounds(self) -> Tuple[float, float]:
        return _BOUNDS[self]

    @property
    def weight(self) -> float:
        return _WEIGHTS[self]


_BOUNDS = {SizeBucket.SMALL: (8.0, 25.0), SizeBucket.MEDIUM: (25.0, 100.0),
           SizeBucket.LARGE: (100.0, math.inf)}
_WEIGHTS = {SizeBucket.SMALL: 0.5, SizeBucket.MEDIUM: 1.0, SizeBucket.LARGE: 5.0}
BUCKETS = (SizeBucket.SMALL, SizeBucket.MEDIUM, SizeBucket.LARGE)


def bucket_of(height: float) -> Optional[SizeBucket]:
    for b in BUCKETS:
        lo, hi = b.bounds
        if lo <= height < hi:
            return b
    return None


def box_height(b: Box) -> float:
    return b[3] - b[1]


@dataclass
class MatchResult:
    true_positives: List[Tuple[Detection, GtObject]] = field(default_factory=list)
    false_positives: List[Detection] = field(default_factory=list)
    false_negatives: List[GtObject] = field(default_factory=list)
    ignored: List[GtObject] = field(default_factory=list)
    # every detection in processing order with its matched GT (or None)
    outcomes: List[Tuple[Detection, Optional[GtObject]]] = field(default_factory=list)


def _by_confidence(dets: Sequence[Detection]) -> List[Detection]:
    return sorted(dets, key=lambda d: -d.confidence)


def match_detections(dets: Sequence[Detection], gts: Sequence[GtObject],
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending confidence.

    Each detection takes the unmatched scorable GT with the highest IoU
    (at least ``iou_threshold``; ties go to the earlier GT).
    """
    result = MatchResult()
    scorable = []
    for g in gts:
        (scorable if g.height >= MIN_SCORABLE_HEIGHT else result.ignored).append(g)
    taken = [False] * len(scorable)
    for d in _by_confidence(dets):
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(scorable):
            if taken[j]:
                continue
            v = iou(d.bbox, g.bbox)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            result.true_positives.append((d, scorable[best]))
            result.outcomes.append((d, scorable[best]))
        else:
            result.false_positives.append(d)
            result.outcomes.append((d, None))
    result.false_negatives = [g for g, t in zip(scorable, taken) if not t]
    return result


def _merge_outcomes(matches: Mapping[str, MatchResult]):
    rows = []
    for image_id in sorted(matches):
        for k, (d, g) in enumerate(matches[image_id].outcomes):
            rows.append((-d.confidence, image_id, k, d, g))
    rows.sort(key=lambda r: r[:3])
    return [(r[3], r[4]) for r in rows]


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: float
    fp: float


def pr_table(matches: Mapping[str, MatchResult], gts_by_image: Mapping[str, Sequence[GtObject]],
             bucket: Optional[SizeBucket] = None, weighting: str = "per_bucket") -> Tuple[List[PRPoint], float]:
    """Precision/recall at every distinct confidence threshold.

    Returns the points (descending threshold) and the recall denominator.
    With a bucket filter, TPs matched to other buckets are ignored and
    unmatched detections count only if their own height falls in the bucket.
    """
    if weighting not in WEIGHTING_MODES:
        raise ValueError(f"weighting must be one of {WEIGHTING_MODES}")

    def gt_weight(g: GtObject) -> float:
        return bucket_of(g.height).weight if weighting == "per_instance" else 1.0

    total = 0.0
    for image_id in sorted(gts_by_image):
        for g in gts_by_image[image_id]:
            b = bucket_of(g.height)
            if b is not None and (bucket is None or b == bucket):
                total += gt_weight(g)

    points = []
    tp = fp = 0.0
    merged = _merge_outcomes(matches)
    for i, (d, g) in enumerate(merged):
        if g is not None:
            if bucket is None or bucket_of(g.height) == bucket:
                tp += gt_weight(g)
        elif bucket is None or bucket_of(box_height(d.bbox)) == bucket:
            fp += 1.0
        last_of_tie = i + 1 == len(merged) or merged[i + 1][0].confidence != d.confidence
        if last_of_tie:
            precision = tp / (tp + fp) if tp + fp > 0 else 0.0
            recall = tp / total if total > 0 else 0.0
            points.append(PRPoint(d.confidence, precision, recall, tp, fp))
    return points, total


def interpolated_ap(points: Sequence[PRPoint]) -> float:
    """All-point interpolated area under a PR curve given in descending threshold order."""
    ap, prev_recall = 0.0, 0.0
    envelope = [p.precision for p in points]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    for p, env in zip(points, envelope):
        ap += (p.recall - prev_recall) * env
        prev_recall = p.recall
    return ap


def match_all(dets_by_image: Mapping[str, Sequence[Detection]], gts_by_image: Mapping[str, Sequence[GtObject]],
              iou_threshold: float = 0.5, min_confidence: float = 0.0) -> Dict[str, MatchResult]:
    ids = set(gts_by_image) | set(dets_by_image)
    return {i: match_detections([d for d in dets_by_image.get(i, ()) if d.confidence >= min_confidence],
                                gts_by_image.get(i, ()), iou_threshold)
            for i in sorted(ids)}


def average_precision(dets_by_image: Mapping[str, Sequence[Detection]],
                      gts_by_image: Mapping[str, Sequence[GtObject]],
                      bucket: Optional[SizeBucket] = None, weighting: str = "per_bucket",
                      iou_threshold: float = 0.5) -> Optional[float]:
    """AP in percent, or ``None`` when there is no scorable ground truth."""
    matches = match_all(dets_by_image, gts_by_image, iou_threshold)
    points, total = pr_table(matches, gts_by_image, bucket, weighting)
    if total <= 0:
        return None
    return 100.0 * interpolated_ap(points)


def weighted_map(ap_by_bucket: Mapping[SizeBucket, Optional[float]],
                 weights: Optional[Mapping[SizeBucket, float]] = None) -> float:
    """Weight-averaged AP over the buckets that have a value."""
    weights = weights or {b: b.weight for b in BUCKETS}
    present = [(weights[b], ap) for b, ap in ap_by_bucket.items() if ap is not None]
    if not present:
        raise ValueError("no bucket has scorable ground truth")
    return sum(w * ap for w, ap in present) / sum(w for w, _ in present)


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: Optional[float]
    fp: int
    tn: int
    tp: int
    fn: int


def roc_and_fpr(pred_grids: Sequence[DetectionGrid], target_grids: Sequence[DetectionGrid],
                thresholds: Optional[Iterable[float]] = None,
                operating_threshold: float = 0.5) -> Tuple[List[RocPoint], float]:
    """Cell-level ROC over a threshold sweep, plus the FPR at ``operating_threshold``.

    Negatives are target cells with t = 0. Points are returned in ascending
    threshold order; TPR is ``None`` when no positive cell exists.
    """
    if len(pred_grids) != len(target_grids):
        raise ValueError("pred and target grid lists differ in length")
    if thresholds is None:
        thresholds = [k / 100 for k in range(101)]
    sweep = sorted(set(float(t) for t in thresholds) | {float(operating_threshold)})
    pos_scores, neg_scores = [], []
    for p, t in zip(pred_grids, target_grids):
        if p.cells.shape != t.cells.shape:
            raise ValueError(f"grid shape mismatch: {p.cells.shape} vs {t.cells.shape}")
        positive = t.confidence == 1.0
        pos_scores.append(p.confidence[positive].ravel())
        neg_scores.append(p.confidence[~positive].ravel())
    pos = np.sort(np.concatenate(pos_scores)) if pos_scores else np.zeros(0)
    neg = np.sort(np.concatenate(neg_scores)) if neg_scores else np.zeros(0)

    points = []
    for theta in sweep:
        th = np.float32(theta)
        n_fp = int(len(neg) - np.searchsorted(neg, th, side="left"))
        n_tp = int(len(pos) - np.searchsorted(pos, th, side="left"))
        n_tn = len(neg) - n_fp
        n_fn = len(pos) - n_tp
        fpr = n_fp / len(neg) if len(neg) else 0.0
        tpr = n_tp / len(pos) if len(pos) else None
        points.append(RocPoint(theta, fpr, tpr, n_fp, n_tn, n_tp, n_fn))
    at = next(p.fpr for p in points if p.threshold == float(operating_threshold))
    curve = [p for p in points if p.threshold in set(float(t) for t in thresholds)]
    return curve, at


def _f1(matches: Mapping[str, MatchResult]) -> float:
    tp = sum(len(m.true_positives) for m in matches.values())
    fp = sum(len(m.false_positives) for m in matches.values())
    fn = sum(len(m.false_negatives) for m in matches.values())
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def threshold_candidates(dets_by_image: Mapping[str, Sequence[Detection]]) -> List[float]:
    cands = {k / 20 for k in range(21)}
    cands.update(d.confidence for ds in dets_by_image.values() for d in ds)
    return sorted(cands)


def select_threshold(dets_by_image: Mapping[str, Sequence[Detection]],
                     gts_by_image: Mapping[str, Sequence[GtObject]],
                     iou_threshold: float = 0.5) -> float:
    """Confidence threshold maximising F1 on a validation set.

    Candidates are every detection confidence plus multiples of 0.05; ties
    resolve to the larger threshold.
    """
    n_gt = sum(1 for gs in gts_by_image.values() for g in gs if g.height >= MIN_SCORABLE_HEIGHT)
    if n_gt == 0:
        raise ValueError("validation set has no scorable ground truth")
    best_theta, best_f1 = None, -1.0
    for theta in threshold_candidates(dets_by_image):
        f1 = _f1(match_all(dets_by_image, gts_by_image, iou_threshold, min_confidence=theta))
        if f1 >= best_f1:
            best_theta, best_f1 = theta, f1
    return best_theta


# --------------------------------------------------------------------------- failure mining


@dataclass(frozen=True)
class Failure:
    kind: str  # "fp" | "fn"
    image_id: str
    bbox: Box
    env: EnvTags
    confidence: Optional[float] = None
    size_3d: Optional[Tuple[float, float, float]] = None
    distance_m: Optional[float] = None

    @property
    def bucket(self) -> Optional[SizeBucket]:
        return bucket_of(box_height(self.bbox))

    def to_dict(self) -> dict:
        b = self.bucket
        return {
            "kind": self.kind,
            "image_id": self.image_id,
            "bbox": list(self.bbox),
            "bucket": b.value if b else None,
            "env": self.env.to_dict(),
            "confidence": self.confidence,
            "size_3d": None if self.size_3d is None else list(self.size_3d),
            "distance_m": self.distance_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Failure":
        if d.get("kind") not in ("fp", "fn"):
            raise ValueError(f"failure kind must be 'fp' or 'fn', got {d.get('kind')!r}")
        size = d.get("size_3d")
        return cls(
            kind=d["kind"],
            image_id=str(d["image_id"]),
            bbox=tuple(float(v) for v in d["bbox"]),
            env=EnvTags.from_dict(d["env"]),
            confidence=d.get("confidence"),
            size_3d=None if size is None else tuple(float(v) for v in size),
            distance_m=d.get("distance_m"),
        )


def collect_failures(matches: Mapping[str, MatchResult], envs: Mapping[str, EnvTags]) -> List[Failure]:
    out = []
    for image_id in sorted(matches):
        m, env = matches[image_id], envs[image_id]
        for d in m.false_positives:
            out.append(Failure("fp", image_id, tuple(d.bbox), env, confidence=d.confidence))
        for g in m.false_negatives:
            out.append(Failure("fn", image_id, tuple(g.bbox), env, size_3d=g.size_3d,
                               distance_m=g.distance_m))
    return out


@dataclass(frozen=True)
class AugmentationRequest:
    kind: str  # "debris" | "hard_negative"
    env: EnvTags
    count: int
    size_3d: Optional[Tuple[float, float, float]] = None
    asset_id: Optional[str] = None
    pixel_bucket: Optional[str] = None
    image_id: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "env": self.env.to_dict(),
            "count": self.count,
            "size_3d": None if self.size_3d is None else list(self.size_3d),
            "asset_id": self.asset_id,
            "pixel_bucket": self.pixel_bucket,
            "image_id": self.image_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationRequest":
        size = d.get("size_3d")
        return cls(kind=d["kind"], env=EnvTags.from_dict(d["env"]), count=int(d["count"]),
                   size_3d=None if size is None else tuple(float(v) for v in size),
                   asset_id=d.get("asset_id"), pixel_bucket=d.get("pixel_bucket"),
                   image_id=d.get("image_id"))


def _volume(dims) -> float:
    l, w, h = dims
    return l * w * h


def nearest_asset(size_3d, catalog: AssetCatalog, tolerance: float = 0.25):
    """Catalog asset with the closest volume, if within ``tolerance`` relative volume."""
    v = _volume(size_3d)
    if v <= 0 or not len(catalog):
        return None
    best = min(catalog.assets, key=lambda a: (abs(a.volume - v), a.asset_id))
    return best if abs(best.volume - v) <= tolerance * v else None


def mine_failures(failures: Iterable[Failure], catalog: Optional[AssetCatalog] = None,
                  volume_tolerance: float = 0.25) -> List[AugmentationRequest]:
    """Aggregate failures into augmentation requests.

    Misses with a 3D size ask for debris of the nearest-volume asset (or the
    raw size when no asset is close enough); misses without one are keyed by
    pixel-size bucket. False positives ask for a hard-negative copy of their
    scene with no debris.
    """
    counts: Counter = Counter()
    for f in failures:
        env_key = f.env.key
        if f.kind == "fp":
            counts[("hard_negative", env_key, None, None, None, f.image_id)] += 1
            continue
        if f.size_3d is not None:
            asset = nearest_asset(f.size_3d, catalog, volume_tolerance) if catalog is not None else None
            if asset is not None:
                counts[("debris", env_key, tuple(asset.dims), asset.asset_id, None, None)] += 1
            else:
                counts[("debris", env_key, tuple(f.size_3d), None, None, None)] += 1
        else:
            b = f.bucket
            counts[("debris", env_key, None, None, b.value if b else None, None)] += 1

    def sort_key(item):
        return tuple("" if v is None else str(v) for v in item[0])

    requests = []
    for (kind, env_key, size, asset_id, pixel_bucket, image_id), n in sorted(counts.items(), key=sort_key):
        requests.append(AugmentationRequest(kind=kind, env=EnvTags(*env_key), count=n, size_3d=size,
                                            asset_id=asset_id, pixel_bucket=pixel_bucket,
                                            image_id=image_id))
    return requests


# --------------------------------------------------------------------------- full report


@dataclass
class EvalReport:
    ap: Dict[str, Optional[float]]
    map_all: Optional[float]
    map_mode: str
    map_per_bucket: Optional[float]
    map_per_instance: Optional[float]
    pr_curve: List[PRPoint]
    roc_curve: List[RocPoint]
    fpr_at_threshold: float
    chosen_threshold: float
    counts: Dict[str, Dict[str, int]]
    failures: List[Failure]

    def table_row(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.2f}"
        cells = [fmt(self.ap.get(b.value)) for b in BUCKETS] + [fmt(self.map_all)]
        return " | ".join(cells)

    def to_dict(self) -> dict:
        return {
            "ap_small": self.ap.get("small"),
            "ap_medium": self.ap.get("medium"),
            "ap_large": self.ap.get("large"),
            "map_all": self.map_all,
            "map_mode": self.map_mode,
            "map_per_bucket": self.map_per_bucket,
            "map_per_instance": self.map_per_instance,
            "pr_curve": [[p.recall, p.precision, p.threshold] for p in self.pr_curve],
            "roc_curve": [[p.fpr, p.tpr, p.threshold] for p in self.roc_curve],
            "fpr_at_threshold": self.fpr_at_threshold,
            "chosen_threshold": self.chosen_threshold,
            "counts": self.counts,
            "failures": [f.to_dict() for f in self.failures],
        }


def evaluate(dets_by_image: Mapping[str, Sequence[Detection]],
             gts_by_image: Mapping[str, Sequence[GtObject]],
             envs: Mapping[str, EnvTags],
             pred_grids: Sequence[DetectionGrid], target_grids: Sequence[DetectionGrid],
             mode: str = "per_instance", iou_threshold: float = 0.5,
             threshold: Optional[float] = None) -> EvalReport:
    """Compute every metric for one prediction set.

    ``threshold`` is the operating confidence used for counts, FPR and the
    failure list; when omitted it is chosen by :func:`select_threshold`.
    """
    if mode not in WEIGHTING_MODES:
        raise ValueError(f"mode must be one of {WEIGHTING_MODES}")
    ap = {b.value: average_precision(dets_by_image, gts_by_image, b, "per_bucket", iou_threshold)
          for b in BUCKETS}
    present = {b: ap[b.value] for b in BUCKETS}
    map_pb = weighted_map(present) if any(v is not None for v in present.values()) else None
    map_pi = average_precision(dets_by_image, gts_by_image, None, "per_instance", iou_threshold)

    matches = match_all(dets_by_image, gts_by_image, iou_threshold)
    pr, _ = pr_table(matches, gts_by_image)

    has_gt = any(g.height >= MIN_SCORABLE_HEIGHT for gs in gts_by_image.values() for g in gs)
    if threshold is None:
        threshold = select_threshold(dets_by_image, gts_by_image, iou_threshold) if has_gt else 0.5
    roc, fpr_at = roc_and_fpr(pred_grids, target_grids, operating_threshold=threshold)

    op = match_all(dets_by_image, gts_by_image, iou_threshold, min_confidence=threshold)
    counts = {b.value: {"gt": 0, "tp": 0, "fp": 0, "fn": 0} for b in BUCKETS}
    for m in op.values():
        for _, g in m.true_positives:
            counts[bucket_of(g.height).value]["tp"] += 1
        for g in m.false_negatives:
            counts[bucket_of(g.height).value]["fn"] += 1
        for d in m.false_positives:
            b = bucket_of(box_height(d.bbox))
            if b is not None:
                counts[b.value]["fp"] += 1
    for gs in gts_by_image.values():
        for g in gs:
            b = bucket_of(g.height)
            if b is not None:
                counts[b.value]["gt"] += 1
    counts["all"] = {
        "gt": sum(c["gt"] for c in counts.values()),
        "tp": sum(len(m.true_positives) for m in op.values()),
        "fp": sum(len(m.false_positives) for m in op.values()),
        "fn": sum(len(m.false_negatives) for m in op.values()),
    }
    return EvalReport(
        ap=ap,
        map_all=map_pi if mode == "per_instance" else map_pb,
        map_mode=mode,
        map_per_bucket=map_pb,
        map_per_instance=map_pi,
        pr_curve=pr,
        roc_curve=roc,
        fpr_at_threshold=fpr_at,
        chosen_threshold=threshold,
        counts=counts,
        failures=collect_failures(op, envs),
    )


def group_by_image(pairs: Iterable[Tuple[str, Detection]]) -> Dict[str, List[Detection]]:
    out: Dict[str, List[Detection]] = defaultdict(list)
    for image_id, det in pairs:
        out[image_id].append(det)
    return dict(out)
