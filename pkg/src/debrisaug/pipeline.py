"""Run configuration and the augment / evaluate / cycle steps of the data loop.

Training happens outside this package: ``run_augment`` produces a dataset,
an external trainer produces predictions, ``run_evaluate`` scores them and
``run_cycle`` turns the failures into the next round's configuration.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import __version__
from .assets import AssetCatalog, load_catalog
from .augment import AugmentationResult, augment_record, load_rgb, write_result
from .evaluation import (BUCKETS, AugmentationRequest, EvalReport, Failure, evaluate, group_by_image,
                         mine_failures)
from .kernels import encode_targets, rasterize_detections, read_detections
from .randomizer import RandomizationConfig, derive_seed
from .scene import SceneRecord, load_manifest, save_manifest, stratified_sample

log = logging.getLogger(__name__)

GRID_STRIDE = 8


class DataError(ValueError):
    """Input data is present but inconsistent."""


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    weighting_mode: str = "per_instance"
    threshold: Optional[float] = None


@dataclass
class CycleState:
    round: int = 0
    previous_failure_count: Optional[int] = None
    convergence_tol: float = 0.05


@dataclass
class RunConfig:
    manifest_path: str = ""
    catalog_path: str = ""
    out_dir: str = ""
    dataset_seed: int = 0
    n_objects_per_image: Union[int, Tuple[int, int]] = 1
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    per_bucket: Optional[int] = None
    workers: int = 1
    asset_weights: Dict[str, float] = field(default_factory=dict)
    env_extra_objects: Dict[str, int] = field(default_factory=dict)
    hard_negatives: List[str] = field(default_factory=list)
    cycle: CycleState = field(default_factory=CycleState)

    def validate(self) -> "RunConfig":
        lo, hi = self.object_range
        if lo < 1 or hi < lo:
            raise ValueError(f"n_objects_per_image must be >= 1, got {self.n_objects_per_image}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.per_bucket is not None and self.per_bucket < 1:
            raise ValueError("per_bucket must be >= 1")
        if self.eval.weighting_mode not in ("per_bucket", "per_instance"):
            raise ValueError(f"unknown weighting mode {self.eval.weighting_mode!r}")
        if not 0 < self.eval.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")
        return self

    @property
    def object_range(self) -> Tuple[int, int]:
        n = self.n_objects_per_image
        if isinstance(n, (list, tuple)):
            return int(n[0]), int(n[1])
        return int(n), int(n)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["randomization"] = self.randomization.to_dict()
        d["eval"] = asdict(self.eval)
        d["cycle"] = asdict(self.cycle)
        if isinstance(self.n_objects_per_image, tuple):
            d["n_objects_per_image"] = list(self.n_objects_per_image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        if "randomization" in d:
            d["randomization"] = RandomizationConfig.from_dict(d["randomization"])
        if "eval" in d:
            d["eval"] = EvalConfig(**d["eval"])
        if "cycle" in d:
            d["cycle"] = CycleState(**d["cycle"])
        if isinstance(d.get("n_objects_per_image"), list):
            d["n_objects_per_image"] = tuple(d["n_objects_per_image"])
        return cls(**d)

    def config_hash(self) -> str:
        """Hash of everything that affects output bytes (paths and worker count excluded)."""
        d = self.to_dict()
        for k in ("manifest_path", "catalog_path", "out_dir", "workers"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def header(self) -> dict:
        return {"tool": "debrisaug", "tool_version": __version__,
                "dataset_seed": self.dataset_seed, "config_hash": self.config_hash()}


def read_config_file(path) -> dict:
    """Parse a JSON or TOML run-config file into a plain dict."""
    path = os.fspath(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def env_key_str(key: Sequence[str]) -> str:
    return "|".join(key)


def objects_for(config: RunConfig, record: SceneRecord) -> int:
    lo, hi = config.object_range
    n = lo
    if hi > lo:
        rng = np.random.default_rng(derive_seed(config.dataset_seed, record.id, -1))
        n = int(rng.integers(lo, hi + 1))
    return n + int(config.env_extra_objects.get(env_key_str(record.env.key), 0))


# --------------------------------------------------------------------------- augment

_WORKER: dict = {}


def _init_worker(catalog: AssetCatalog, config: RunConfig) -> None:
    _WORKER["catalog"] = catalog
    _WORKER["config"] = config


def _augment_one(record: SceneRecord):
    """Augment and write one record. Returns (augmented record dict, provenance, error)."""
    catalog, config = _WORKER["catalog"], _WORKER["config"]
    try:
        result = augment_record(record, catalog, config.randomization, objects_for(config, record),
                                config.dataset_seed, asset_weights=config.asset_weights or None)
        out = write_result(result, record, config.out_dir, config.header())
        return out, result.provenance, None
    except (OSError, ValueError) as exc:
        return None, [], f"{record.id}: {exc}"


def _hard_negative(record: SceneRecord, config: RunConfig) -> SceneRecord:
    clone = SceneRecord(id=f"{record.id}__hn", image_path=record.image_path, width=record.width,
                        height=record.height, camera=record.camera, gt_objects=record.gt_objects,
                        lanes=record.lanes, env=record.env)
    result = AugmentationResult(image=load_rgb(record.image_path))
    return write_result(result, clone, config.out_dir, config.header())


@dataclass
class AugmentSummary:
    records: int
    attempts: int
    accepted: int
    reject_reasons: Dict[str, int]
    errors: List[str]
    hard_negatives: int = 0

    @property
    def accept_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accept_rate"] = self.accept_rate
        return d


def run_augment(config: RunConfig) -> AugmentSummary:
    """Augment every manifest record and write a self-hosting dataset to ``config.out_dir``."""
    config.validate()
    catalog = load_catalog(config.catalog_path)
    records = load_manifest(config.manifest_path)
    if config.per_bucket is not None:
        records = stratified_sample(records, config.per_bucket, config.dataset_seed)
    os.makedirs(config.out_dir, exist_ok=True)

    if config.workers == 1:
        _init_worker(catalog, config)
        outputs = [_augment_one(r) for r in records]
    else:
        with ProcessPoolExecutor(max_workers=config.workers, initializer=_init_worker,
                                 initargs=(catalog, config)) as pool:
            outputs = list(pool.map(_augment_one, records))

    augmented, reasons, errors = [], Counter(), []
    attempts = accepted = 0
    for out, provenance, err in outputs:
        if err is not None:
            log.error("augmentation failed for %s", err)
            errors.append(err)
            continue
        augmented.append(out)
        for entry in provenance:
            attempts += 1
            if entry["accepted"]:
                accepted += 1
            else:
                reasons[entry["reject_reason"]] += 1

    by_id = {r.id: r for r in records}
    n_neg = 0
    for rid in config.hard_negatives:
        if rid not in by_id:
            log.warning("hard-negative request for unknown record %s", rid)
            continue
        try:
            augmented.append(_hard_negative(by_id[rid], config))
            n_neg += 1
        except OSError as exc:
            errors.append(f"{rid}: {exc}")

    save_manifest(augmented, os.path.join(config.out_dir, "manifest.jsonl"))
    summary = AugmentSummary(records=len(records), attempts=attempts, accepted=accepted,
                             reject_reasons=dict(sorted(reasons.items())), errors=errors,
                             hard_negatives=n_neg)
    cfg = config.to_dict()
    for k in ("manifest_path", "catalog_path", "out_dir", "workers"):
        cfg.pop(k)
    with open(os.path.join(config.out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump({"header": config.header(), "config": cfg, "summary": summary.to_dict()},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# --------------------------------------------------------------------------- evaluate


def grid_dims_for(width: int, height: int) -> Tuple[int, int]:
    return max(1, width // GRID_STRIDE), max(1, height // GRID_STRIDE)


def _write_csv(path: str, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


PR_COLUMNS = ("threshold", "precision", "recall", "tp", "fp")
ROC_COLUMNS = ("threshold", "fpr", "tpr", "fp", "tn", "tp", "fn")


def run_evaluate(predictions_path, gt_manifest_path, out_dir, eval_cfg: Optional[EvalConfig] = None,
                 plot_format: Optional[str] = "svg", header: Optional[dict] = None) -> EvalReport:
    """Score a predictions JSONL against a manifest and write the report files.

    Writes ``report.json``, ``pr_curve.csv``, ``roc_curve.csv``,
    ``failures.jsonl`` and, unless ``plot_format`` is None, the two figures.
    """
    eval_cfg = eval_cfg or EvalConfig()
    records = load_manifest(gt_manifest_path, check_images=False)
    by_id = {r.id: r for r in records}
    try:
        pairs = read_detections(predictions_path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    unknown = sorted({i for i, _ in pairs} - set(by_id))
    if unknown:
        raise DataError(f"predictions reference unknown image ids: {unknown}")
    dets = group_by_image(pairs)
    gts = {r.id: [g for g in r.gt_objects if g.category == "debris"] for r in records}
    envs = {r.id: r.env for r in records}

    targets, preds = [], []
    for r in records:
        dims = grid_dims_for(r.width, r.height)
        targets.append(encode_targets([g.bbox for g in gts[r.id] if g.height >= 8], (r.width, r.height), dims))
        preds.append(rasterize_detections(dets.get(r.id, []), (r.width, r.height), dims))

    report = evaluate(dets, gts, envs, preds, targets, mode=eval_cfg.weighting_mode,
                      iou_threshold=eval_cfg.iou_threshold, threshold=eval_cfg.threshold)

    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    doc = {"header": header or {"tool": "debrisaug", "tool_version": __version__},
           "eval_config": asdict(eval_cfg), **report.to_dict()}
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(os.path.join(out_dir, "pr_curve.csv"), PR_COLUMNS,
               [(p.threshold, p.precision, p.recall, p.tp, p.fp) for p in report.pr_curve])
    _write_csv(os.path.join(out_dir, "roc_curve.csv"), ROC_COLUMNS,
               [(p.threshold, p.fpr, "" if p.tpr is None else p.tpr, p.fp, p.tn, p.tp, p.fn)
                for p in report.roc_curve])
    with open(os.path.join(out_dir, "failures.jsonl"), "w", encoding="utf-8") as fh:
        for f in report.failures:
            fh.write(json.dumps(f.to_dict(), sort_keys=True) + "\n")
    if plot_format:
        from .plotting import plot_pr_curve, plot_roc_curve

        plot_pr_curve(report.pr_curve, os.path.join(out_dir, f"pr_curve.{plot_format}"))
        plot_roc_curve(report.roc_curve, os.path.join(out_dir, f"roc_curve.{plot_format}"))
    return report


# --------------------------------------------------------------------------- cycle


def size_class_groups(catalog: AssetCatalog) -> Dict[str, List[str]]:
    """Split assets into small / medium / large thirds by volume."""
    ordered = [a.asset_id for a in sorted(catalog.assets, key=lambda a: (a.volume, a.asset_id))]
    parts = np.array_split(np.arange(len(ordered)), 3)
    return {b.value: [ordered[i] for i in part] for b, part in zip(BUCKETS, parts)}


def request_weights(requests: Sequence[AugmentationRequest], catalog: AssetCatalog,
                    base: Optional[Dict[str, float]] = None) -> Dict[str, float]:
    """Asset sampling weights for the next round: 1 + requested counts.

    Pixel-bucket requests spread their count over the assets in the
    matching volume third.
    """
    weights = {a.asset_id: float((base or {}).get(a.asset_id, 1.0)) for a in catalog.assets}
    groups = size_class_groups(catalog)
    for req in requests:
        if req.kind != "debris":
            continue
        if req.asset_id is not None and req.asset_id in weights:
            weights[req.asset_id] += req.count
        elif req.pixel_bucket is not None and groups.get(req.pixel_bucket):
            share = req.count / len(groups[req.pixel_bucket])
            for aid in groups[req.pixel_bucket]:
                weights[aid] += share
        elif req.size_3d is not None:
            target = float(np.prod(req.size_3d))
            nearest = min(catalog.assets, key=lambda a: (abs(a.volume - target), a.asset_id))
            weights[nearest.asset_id] += req.count
    return dict(sorted(weights.items()))


@dataclass
class CycleOutcome:
    requests: List[AugmentationRequest]
    next_config: RunConfig
    failure_count: int
    previous_failure_count: Optional[int]
    relative_change: Optional[float]
    converged: bool

    def to_dict(self) -> dict:
        return {
            "failure_count": self.failure_count,
            "previous_failure_count": self.previous_failure_count,
            "relative_change": self.relative_change,
            "converged": self.converged,
            "requests": len(self.requests),
            "round": self.next_config.cycle.round,
        }


def converged(current: int, previous: Optional[int], tol: float) -> Tuple[bool, Optional[float]]:
    if current == 0:
        return True, 0.0 if previous is not None else None
    if previous is None:
        return False, None
    if previous == 0:
        return False, None
    change = abs(current - previous) / previous
    return change < tol, change


def load_report_failures(report_path) -> List[Failure]:
    try:
        with open(report_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return [Failure.from_dict(f) for f in doc["failures"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed report {report_path}: {exc}") from exc


def run_cycle(report_path, catalog_path, out_dir, config: Optional[RunConfig] = None) -> CycleOutcome:
    """Mine a report's failures into requests and the next round's config."""
    config = config or RunConfig()
    failures = load_report_failures(report_path)
    catalog = load_catalog(catalog_path)
    requests = mine_failures(failures, catalog)

    n = len(failures)
    prev = config.cycle.previous_failure_count
    done, change = converged(n, prev, config.cycle.convergence_tol)

    env_extra = dict(config.env_extra_objects)
    for req in requests:
        if req.kind == "debris":
            env_extra[env_key_str(req.env.key)] = 1
    next_cfg = RunConfig.from_dict(config.to_dict())
    next_cfg.dataset_seed = config.dataset_seed + 1
    next_cfg.asset_weights = request_weights(requests, catalog, config.asset_weights)
    next_cfg.env_extra_objects = dict(sorted(env_extra.items()))
    next_cfg.hard_negatives = sorted({r.image_id for r in requests if r.kind == "hard_negative"})
    next_cfg.cycle = CycleState(round=config.cycle.round + 1, previous_failure_count=n,
                                convergence_tol=config.cycle.convergence_tol)

    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "requests.jsonl"), "w", encoding="utf-8") as fh:
        for req in requests:
            fh.write(json.dumps(req.to_dict(), sort_keys=True) + "\n")
    save_config(next_cfg, os.path.join(out_dir, "next_config.json"))
    outcome = CycleOutcome(requests, next_cfg, n, prev, change, done)
    with open(os.path.join(out_dir, "cycle.json"), "w", encoding="utf-8") as fh:
        json.dump({"header": config.header(), **outcome.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return outcome
