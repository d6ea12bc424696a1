"""Command-line entry point.

Exit codes: 0 success, 1 usage / invalid configuration, 2 data error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from .assets import AssetError
from .kernels import (DEFAULT_IMAGE, LossConfig, decode_grid, grid_losses, nms, read_grid,
                      write_detections)
from .pipeline import (DataError, RunConfig, read_config_file, run_augment, run_cycle,
                       run_evaluate)
from .scene import ManifestError, load_manifest, save_manifest, stratified_sample

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("debrisaug")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML run config; CLI flags take precedence")
    p.add_argument("--seed", type=int, dest="dataset_seed", help="dataset seed")
    p.add_argument("--n-objects", type=int, nargs="+", metavar="N",
                   help="objects per image: one value or an inclusive LO HI range")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.add_argument("--per-bucket", type=int, help="stratify: keep at most N records per env bucket")
    p.add_argument("--max-distance", type=float, help="placement distance cap in metres")
    p.add_argument("--min-bbox-height", type=float, help="minimum debris box height in pixels")
    p.add_argument("--bound-mode", choices=("and", "or"), help="how distance and height bounds combine")
    p.add_argument("--max-attempts", type=int, help="rejection-sampling attempts per object")


def build_config(args) -> RunConfig:
    data = read_config_file(args.config) if getattr(args, "config", None) else {}
    rnd = dict(data.get("randomization", {}))
    for flag, key in (("max_distance", "max_distance_m"), ("min_bbox_height", "min_bbox_height_px"),
                      ("bound_mode", "bound_mode"), ("max_attempts", "max_attempts")):
        value = getattr(args, flag, None)
        if value is not None:
            rnd[key] = value
    data["randomization"] = rnd
    for key in ("manifest_path", "catalog_path", "out_dir", "dataset_seed", "workers", "per_bucket"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    n = getattr(args, "n_objects", None)
    if n is not None:
        if len(n) > 2:
            raise UsageError("--n-objects takes one value or a LO HI pair")
        data["n_objects_per_image"] = n[0] if len(n) == 1 else list(n)
    ev = dict(data.get("eval", {}))
    for flag, key in (("iou", "iou_threshold"), ("weighting", "weighting_mode"), ("threshold", "threshold")):
        value = getattr(args, flag, None)
        if value is not None:
            ev[key] = value
    data["eval"] = ev
    try:
        return RunConfig.from_dict(data).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def cmd_augment(args) -> int:
    config = build_config(args)
    if not config.manifest_path or not config.catalog_path or not config.out_dir:
        raise UsageError("augment needs --manifest, --catalog and --out")
    summary = run_augment(config)
    print(f"records: {summary.records}  attempts: {summary.attempts}  accepted: {summary.accepted}"
          f"  accept rate: {summary.accept_rate:.3f}")
    for reason, count in summary.reject_reasons.items():
        print(f"  rejected {reason}: {count}")
    if summary.hard_negatives:
        print(f"hard negatives: {summary.hard_negatives}")
    if summary.errors:
        for err in summary.errors:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = build_config(args)
    report = run_evaluate(args.predictions, args.gt_manifest, args.out, config.eval,
                          plot_format=None if args.plots == "none" else args.plots,
                          header=config.header())
    print("small | medium | large | all")
    print(report.table_row())
    print(f"mode: {report.map_mode}  threshold: {report.chosen_threshold:g}  "
          f"FPR@threshold: {report.fpr_at_threshold:.6f}  "
          f"FN: {report.counts['all']['fn']}  FP: {report.counts['all']['fp']}")
    return EXIT_OK


def cmd_cycle(args) -> int:
    config = build_config(args)
    outcome = run_cycle(args.report, args.catalog, args.out, config)
    print(f"failures: {outcome.failure_count}  requests: {len(outcome.requests)}  "
          f"converged: {'yes' if outcome.converged else 'no'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    records = load_manifest(args.manifest)
    picked = stratified_sample(records, args.per_bucket, args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_manifest(picked, args.out)
    print(f"kept {len(picked)} of {len(records)} records")
    return EXIT_OK


def cmd_kernels(args) -> int:
    pred = read_grid(args.pred)
    image_dims = tuple(args.image_size)
    out = {"grid": list(pred.grid_dims)}
    if args.target:
        target = read_grid(args.target)
        try:
            out.update(grid_losses(target, pred, LossConfig(args.epsilon)))
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    dets = decode_grid(pred, image_dims, args.conf)
    kept = nms(dets, args.nms_iou)
    out["decoded"] = len(dets)
    out["kept"] = len(kept)
    if args.out:
        write_detections(args.out, [(args.image_id, d) for d in kept])
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_demo(args) -> int:
    from .synthetic import make_demo_dataset

    paths = make_demo_dataset(args.out, args.images, args.seed)
    print(json.dumps(paths, sort_keys=True))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="debrisaug", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("augment", help="composite debris into a scene manifest")
    p.add_argument("--manifest", dest="manifest_path")
    p.add_argument("--catalog", dest="catalog_path")
    p.add_argument("--out", dest="out_dir")
    _add_run_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("evaluate", help="score predictions against a ground-truth manifest")
    p.add_argument("--predictions", required=True, help="detections JSONL")
    p.add_argument("--gt-manifest", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--config")
    p.add_argument("--iou", type=float, help="matching IoU threshold (default 0.5)")
    p.add_argument("--weighting", choices=("per_instance", "per_bucket"))
    p.add_argument("--threshold", type=float, help="operating confidence; default: best F1")
    p.add_argument("--plots", choices=("svg", "png", "pdf", "none"), default="svg")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cycle", help="turn a report's failures into the next round's config")
    p.add_argument("--report", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="this round's run config (e.g. a previous next_config.json)")
    p.set_defaults(func=cmd_cycle)

    p = sub.add_parser("sample", help="stratified subset of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--per-bucket", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output manifest path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("kernels", help="losses, decoding and NMS on serialised grids")
    p.add_argument("--pred", required=True, help="prediction grid (.hzgd)")
    p.add_argument("--target", help="target grid (.hzgd); enables loss output")
    p.add_argument("--image-size", type=int, nargs=2, default=list(DEFAULT_IMAGE), metavar=("W", "H"))
    p.add_argument("--conf", type=float, default=0.5)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=1e-7)
    p.add_argument("--image-id", default="image")
    p.add_argument("--out", help="write kept detections as JSONL")
    p.set_defaults(func=cmd_kernels)

    p = sub.add_parser("demo", help="write a procedural demo dataset and catalog")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"debrisaug: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, AssetError, DataError) as exc:
        print(f"debrisaug: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"debrisaug: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"debrisaug: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
