"""Acceptance gate: one test per headline criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""

import hashlib
import json
import math
import os
import time
from fractions import Fraction

import numpy as np
from scipy import stats

from conftest import debris, make_record
from oracles import ap_oracle, cell_counts, exhaustive_match, nms_fixed_point, point_in_polygon
from debrisaug.augment import RejectReason, augment_record, check_semantic
from debrisaug.cli import main
from debrisaug.evaluation import SizeBucket, average_precision, bucket_of, match_detections, roc_and_fpr, weighted_map
from debrisaug.geometry import CameraCalib, GroundPose, ground_to_image, horizon_row, project_cuboid_bbox
from debrisaug.kernels import (Detection, DetectionGrid, bce_grad, bce_loss, decode_grid, encode_targets, iou,
                               l1_grad, l1_loss, nms, nms_order_key)
from debrisaug.assets import DebrisAsset
from debrisaug.randomizer import PlacementSample, RandomizationConfig, sample_placement
from debrisaug.scene import GtObject, LaneSet, load_manifest
from debrisaug.synthetic import DEMO_SIZE, demo_calib, demo_lanes, make_demo_dataset


def verdict(capsys, name, ok, detail=""):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


def _det(box, conf):
    return Detection(tuple(float(v) for v in box), float(conf))


def _micro_instance(rng, n_det, n_gt):
    gts = []
    for _ in range(n_gt):
        x, y = rng.integers(0, 60, 2)
        w, h = rng.integers(4, 60, 2)  # some GTs fall under 8 px
        gts.append(debris((x, y, x + w, y + h)))
    dets = []
    for _ in range(n_det):
        if gts and rng.random() < 0.65:
            g = np.array(gts[rng.integers(len(gts))].bbox)
            box = g + rng.integers(-5, 6, 4)
            if box[2] <= box[0] or box[3] <= box[1]:
                box = g
        else:
            x, y = rng.integers(0, 60, 2)
            w, h = rng.integers(4, 60, 2)
            box = np.array([x, y, x + w, y + h])
        dets.append(_det(box, rng.choice([0.1, 0.3, 0.5, 0.5, 0.7, 0.9])))
    return dets, gts


# ------------------------------------------------------------------ 1


def test_metric_oracle_equivalence(capsys):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    n_instances, mismatches = 150, []
    weights = lambda g: Fraction(bucket_of(g.height).weight)  # noqa: E731
    for k in range(n_instances):
        dets_by, gts_by = {}, {}
        for im in range(int(rng.integers(1, 3))):
            d, g = _micro_instance(rng, int(rng.integers(0, 7)), int(rng.integers(1, 5)))
            dets_by[f"i{im}"], gts_by[f"i{im}"] = d, g
        # matching vs exhaustive lexicographic assignment
        for im in dets_by:
            scorable = [g for g in gts_by[im] if g.height >= 8]
            m = match_detections(dets_by[im], gts_by[im])
            want = exhaustive_match(dets_by[im], scorable, 0.5)
            got = {}
            for d, g in m.outcomes:
                i = next(i for i, x in enumerate(dets_by[im]) if x is d)
                got[i] = None if g is None else next(j for j, x in enumerate(scorable) if x is g)
            if got != want:
                mismatches.append(("match", k, im))
        # AP overall, per bucket and per-instance weighted, against exact rational re-matching
        checks = [(None, "per_bucket", dict()),
                  (None, "per_instance", dict(weight_fn=weights))]
        for b in SizeBucket:
            checks.append((b, "per_bucket", dict(gt_filter=lambda g, b=b: bucket_of(g.height) == b,
                                                 fp_filter=lambda d, b=b: bucket_of(d.bbox[3] - d.bbox[1]) == b)))
        for bucket, mode, kw in checks:
            got = average_precision(dets_by, gts_by, bucket, mode)
            want = ap_oracle(dets_by, gts_by, 0.5, **kw)
            if (got is None) != (want is None) or (want is not None and abs(got / 100 - float(want)) > 1e-12):
                mismatches.append(("ap", k, bucket, mode, got, want))
        # FPR against a cell-by-cell count on small grids
        shape = (4, 6)
        t = [DetectionGrid(np.dstack([(rng.random(shape) < 0.25).astype(np.float32)] + [np.zeros(shape, np.float32)] * 4))
             for _ in range(2)]
        p = [DetectionGrid(np.dstack([(rng.integers(0, 17, shape) / 16).astype(np.float32)] +
                                     [np.zeros(shape, np.float32)] * 4)) for _ in range(2)]
        ths = [j / 16 for j in range(17)]
        curve, fpr_at = roc_and_fpr(p, t, ths, operating_threshold=0.5)
        for pt in curve:
            fp, tn, tp, fn = cell_counts(p, t, pt.threshold)
            if (pt.fp, pt.tn, pt.tp, pt.fn) != (fp, tn, tp, fn) or pt.fpr != (fp / (fp + tn) if fp + tn else 0.0):
                mismatches.append(("roc", k, pt.threshold))
        fp, tn, _, _ = cell_counts(p, t, 0.5)
        if fpr_at != fp / (fp + tn):
            mismatches.append(("fpr", k))
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 10.0
    verdict(capsys, "metric-oracle equivalence", ok,
            f"{n_instances} micro-instances, {len(mismatches)} mismatches, {elapsed:.2f}s (limit 10s)")


# ------------------------------------------------------------------ 2


def test_weighted_map_anchor(capsys):
    aps = {SizeBucket.SMALL: 73.92, SizeBucket.MEDIUM: 83.76, SizeBucket.LARGE: 75.27}
    value = weighted_map(aps)
    printed = 76.36
    ok = round(value, 2) == 76.47 and abs(value - printed) <= 0.15
    verdict(capsys, "weighted-mAP anchor", ok,
            f"per_bucket mAP {value:.4f} vs reference 76.36, discrepancy {value - printed:+.4f} (limit 0.15)")


# ------------------------------------------------------------------ 3


def _central(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


def test_loss_kernels(capsys):
    boundary = [bce_loss(np.array([t]), np.array([p])) for t in (0.0, 1.0) for p in (0.0, 1.0)]
    finite = all(math.isfinite(v) for v in boundary)
    s1 = bce_loss([1.0], [0.5])
    s2 = bce_loss([1.0], [0.0])
    scalars = abs(s1 - 0.693147) <= 1e-4 and abs(s2 - 16.1181) <= 1e-4

    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(1, 5, 2))
        t = (rng.random(shape) < 0.4).astype(float)
        p = rng.uniform(0.01, 0.99, shape)
        worst = max(worst, _rel(bce_grad(t, p), _central(lambda x: bce_loss(t, x), p)))
        tb = rng.random(shape + (4,))
        offset = rng.choice([-1.0, 1.0], tb.shape) * rng.uniform(1e-3, 0.3, tb.shape)  # stay off the kinks
        pb = tb + offset
        mask = t if t.any() else np.ones(shape)
        g = l1_grad(tb, pb, mask)
        num = _central(lambda x: l1_loss(tb, x, mask), pb)
        worst = max(worst, _rel(g[mask == 1], num[mask == 1]))
        if np.abs(num[mask != 1]).max(initial=0) > 1e-9 or np.abs(g[mask != 1]).max(initial=0) != 0:
            worst = math.inf
    ok = finite and scalars and worst <= 1e-5
    verdict(capsys, "loss kernels", ok,
            f"boundary finite={finite}, bce(1,0.5)={s1:.6f}, bce(1,0)={s2:.4f}, "
            f"max gradient rel. error over 1000 grids {worst:.2e} (limit 1e-5)")


# ------------------------------------------------------------------ 4


def test_encode_decode_round_trip(capsys):
    rng = np.random.default_rng(11)
    W, H = 960, 544
    worst_center, size_mismatch = 0.0, 0
    for _ in range(1000):
        w, h = rng.uniform(1, 400), rng.uniform(1, 300)
        x0, y0 = rng.uniform(0, W - w), rng.uniform(0, H - h)
        box = (x0, y0, x0 + w, y0 + h)
        grid = encode_targets([box], (W, H), (120, 68))
        dets = decode_grid(grid, (W, H), 0.5)
        if len(dets) != 1:
            size_mismatch += 1
            continue
        b = dets[0].bbox
        worst_center = max(worst_center, abs((b[0] + b[2]) / 2 - (x0 + x0 + w) / 2),
                           abs((b[1] + b[3]) / 2 - (y0 + y0 + h) / 2))
        # exact up to the float32 storage of the half-size channels
        if (np.float32((b[2] - b[0]) / (2 * W)) != np.float32(w / (2 * W))
                or np.float32((b[3] - b[1]) / (2 * H)) != np.float32(h / (2 * H))):
            size_mismatch += 1
    ok = worst_center <= 8.0 and size_mismatch == 0
    verdict(capsys, "encode/decode round-trip", ok,
            f"1000 boxes, max centre error {worst_center:.2e} px (limit 8), float32 size mismatches {size_mismatch}")


# ------------------------------------------------------------------ 5


def _truck_scene(calib, lanes):
    truck = project_cuboid_bbox(calib, GroundPose(forward=30.0), (8.0, 2.5, 3.2), DEMO_SIZE)
    side = project_cuboid_bbox(calib, GroundPose(forward=18.0, lateral=3.6), (8.0, 2.5, 3.2), DEMO_SIZE)
    ped = project_cuboid_bbox(calib, GroundPose(forward=22.0, lateral=-3.0), (0.4, 0.5, 1.7), DEMO_SIZE)
    gts = [GtObject(truck, "vehicle", 30.0), GtObject(side, "vehicle", 18.0), GtObject(ped, "pedestrian", 22.0)]
    return make_record(calib, lanes, gts=gts), truck


def test_semantic_constraint_suite(capsys):
    calib = demo_calib()
    lanes = demo_lanes(calib)
    rec, truck = _truck_scene(calib, lanes)
    cx = (truck[0] + truck[2]) / 2
    rock = (cx - 6, truck[3] - 22, cx + 6, truck[3] - 10)
    h = horizon_row(calib)
    pallet = (cx - 15, h - 40, cx + 15, h - 25)
    canonical = (check_semantic(rec, rock) == RejectReason.IMPLAUSIBLE_OCCLUSION
            and check_semantic(rec, pallet) == RejectReason.IN_SKY)

    # closed-form horizon, independent of the library
    horizon = calib.cy - calib.fy * math.tan(calib.pitch)
    img = np.full((DEMO_SIZE[1], DEMO_SIZE[0], 3), 100, np.uint8)
    from debrisaug.synthetic import make_catalog
    catalog = make_catalog()
    cfg = RandomizationConfig()
    violations, accepted = [], 0
    for draw in range(1000):
        res = augment_record(rec, catalog, cfg, 1, dataset_seed=draw, image=img)
        for lab, entry in zip(res.added_labels, [p for p in res.provenance if p["accepted"]]):
            accepted += 1
            x0, y0, x1, y1 = lab.bbox
            on_lane = any(point_in_polygon((x0 + x1) / 2, y1, poly) for poly in lanes.polygons())
            below_horizon = y1 > horizon
            tall = y1 - y0 >= 10.0
            near = entry["sample"]["pose"]["forward"] <= 300.0
            inside = 0 <= x0 < x1 <= DEMO_SIZE[0] and 0 <= y0 < y1 <= DEMO_SIZE[1]
            occl = all(y1 > g.bbox[3] and g.category not in ("pedestrian", "bike") for g in rec.gt_objects
                       if min(x1, g.bbox[2]) > max(x0, g.bbox[0]) and min(y1, g.bbox[3]) > max(y0, g.bbox[1]))
            if not (on_lane and below_horizon and tall and near and inside and occl):
                violations.append((draw, lab.bbox))
    ok = canonical and not violations and accepted > 100
    verdict(capsys, "semantic constraint suite", ok,
            f"canonical cases {'ok' if canonical else 'wrong'}; {accepted} accepted of 1000 draws, "
            f"{len(violations)} violations")


# ------------------------------------------------------------------ 6


def _digest(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def test_determinism(capsys, tmp_path):
    data = make_demo_dataset(str(tmp_path / "fixture"), n_images=10, seed=5)
    runs = {}
    for name, workers in (("a", 1), ("b", 1), ("c", 8)):
        rc = main(["augment", "--manifest", data["manifest"], "--catalog", data["catalog"],
                   "--out", str(tmp_path / name), "--seed", "1234", "--n-objects", "1", "4",
                   "--workers", str(workers)])
        assert rc == 0
        runs[name] = _digest(tmp_path / name)
    n_files = len(runs["a"])
    ok = runs["a"] == runs["b"] == runs["c"] and n_files >= 32
    verdict(capsys, "determinism", ok,
            f"{n_files} files byte-identical across two runs and workers 1 vs 8" if ok else "outputs differ")


# ------------------------------------------------------------------ 7


def _cutoff(fy, cam_h, s, min_px):
    """Forward distance where a level-viewed upright cube of side s is exactly min_px tall."""
    a, b = min_px, -fy * s
    c = -(min_px * s * s / 4 + fy * s / 2 * (2 * cam_h - s))
    return (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)


def test_randomization_statistics(capsys):
    calib = CameraCalib(fx=1000.0, fy=1000.0, cx=480.0, cy=272.0, cam_height=1.5, pitch=0.0)
    # ego lane only, so the lane footprint never leaves the image and rejection depends on height alone
    ego = tuple(ground_to_image(calib, f, x) for f, x in ((4.0, -1.8), (400.0, -1.8), (400.0, 1.8), (4.0, 1.8)))
    lanes = LaneSet(ego=ego)
    side = 0.3
    asset = DebrisAsset("cube", "box", np.full((8, 8, 3), 90, np.uint8), np.ones((8, 8), bool), (side,) * 3)
    cfg = RandomizationConfig(max_distance_m=60.0, yaw_range=(0, 0), pitch_range=(0, 0), roll_range=(0, 0))
    hi = _cutoff(calib.fy, calib.cam_height, side, 10.0)
    lo = cfg.min_forward_m

    rng = np.random.default_rng(99)
    forwards = []
    while len(forwards) < 10_000:
        s = sample_placement(cfg, calib, lanes, asset, rng, DEMO_SIZE)
        if isinstance(s, PlacementSample):
            forwards.append(s.pose.forward)
    forwards = np.array(forwards)
    ks = stats.kstest(forwards, "uniform", args=(lo, hi - lo))
    # the test has power: a region only 10% too long is rejected
    wrong = stats.kstest(forwards, "uniform", args=(lo, 1.1 * (hi - lo)))
    in_region = bool(forwards.min() > lo and forwards.max() <= hi)

    degenerate = RandomizationConfig(yaw_range=(0.4, 0.4), pitch_range=(-0.1, -0.1), roll_range=(0.2, 0.2),
                                     gain_range=(0.9, 0.9), fog_beta_range=(0.01, 0.01))
    consts = set()
    for _ in range(200):
        s = sample_placement(degenerate, calib, lanes, asset, rng, DEMO_SIZE)
        if isinstance(s, PlacementSample):
            consts.add((s.pose.yaw, s.pose.obj_pitch, s.pose.roll, s.gains, s.fog_beta))
    constant = consts == {(0.4, -0.1, 0.2, (0.9, 0.9, 0.9), 0.01)}
    ok = ks.pvalue > 0.01 and wrong.pvalue < 0.01 and in_region and constant
    verdict(capsys, "randomization statistics", ok,
            f"KS p={ks.pvalue:.3f} on U({lo:g}, {hi:.3f}] with n=10000 (alpha 0.01); "
            f"wrong-region p={wrong.pvalue:.1e}; degenerate draws constant={constant}")


# ------------------------------------------------------------------ 8


def test_nms(capsys):
    rng = np.random.default_rng(5)
    mismatches = antichain_breaks = 0
    for _ in range(500):
        n = int(rng.integers(1, 7))
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        dets = []
        for _ in range(n):
            x, y = rng.integers(0, 25, 2)
            w, h = rng.integers(2, 14, 2)
            dets.append(_det((x, y, x + w, y + h), rng.choice([0.4, 0.6, 0.6, 0.8, 0.9])))
        kept = nms(dets, thr)
        sols = nms_fixed_point(dets, nms_order_key, iou, thr)
        if len(sols) != 1 or kept != sols[0]:
            mismatches += 1
        if any(iou(a.bbox, b.bbox) >= thr for i, a in enumerate(kept) for b in kept[i + 1:]):
            antichain_breaks += 1
        if [d.confidence for d in kept] != sorted((d.confidence for d in kept), reverse=True):
            mismatches += 1
    ok = mismatches == 0 and antichain_breaks == 0
    verdict(capsys, "NMS", ok, f"500 trials, {mismatches} oracle mismatches, {antichain_breaks} antichain breaks")


# ------------------------------------------------------------------ 9


def test_end_to_end_smoke(capsys, tmp_path):
    data = make_demo_dataset(str(tmp_path / "fixture"), n_images=10, seed=8)
    aug = tmp_path / "aug"
    assert main(["augment", "--manifest", data["manifest"], "--catalog", data["catalog"], "--out", str(aug),
                 "--seed", "77", "--n-objects", "3"]) == 0
    recs = load_manifest(aug / "manifest.jsonl")
    gts = [(r.id, g) for r in recs for g in r.gt_objects if g.category == "debris"]

    def write(path, rows):
        with open(path, "w", encoding="utf-8") as fh:
            for rid, box in rows:
                fh.write(json.dumps({"image_id": rid, "bbox": list(box), "confidence": 1.0}) + "\n")

    write(tmp_path / "perfect.jsonl", [(rid, g.bbox) for rid, g in gts])
    assert main(["evaluate", "--predictions", str(tmp_path / "perfect.jsonl"), "--gt-manifest",
                 str(aug / "manifest.jsonl"), "--out", str(tmp_path / "rep_perfect")]) == 0
    perfect = json.loads((tmp_path / "rep_perfect" / "report.json").read_text())
    present = {b: perfect[f"ap_{b}"] for b in ("small", "medium", "large") if perfect[f"ap_{b}"] is not None}
    perfect_ok = bool(present) and all(v == 100.0 for v in present.values()) and perfect["map_all"] == 100.0

    # corrupt every fifth prediction by moving it off its object
    corrupted = [i for i in range(len(gts)) if i % 5 == 0]
    rows = []
    for i, (rid, g) in enumerate(gts):
        x0, y0, x1, y1 = g.bbox
        rows.append((rid, (x0 + 2 * (x1 - x0), y0, x1 + 2 * (x1 - x0), y1) if i in corrupted else g.bbox))
    write(tmp_path / "corrupt.jsonl", rows)
    assert main(["evaluate", "--predictions", str(tmp_path / "corrupt.jsonl"), "--gt-manifest",
                 str(aug / "manifest.jsonl"), "--out", str(tmp_path / "rep_bad")]) == 0
    bad = json.loads((tmp_path / "rep_bad" / "report.json").read_text())
    failures = (tmp_path / "rep_bad" / "failures.jsonl").read_text().splitlines()
    dropped = bad["map_all"] < perfect["map_all"]

    assert main(["cycle", "--report", str(tmp_path / "rep_bad" / "report.json"), "--catalog", data["catalog"],
                 "--out", str(tmp_path / "cyc")]) == 0
    reqs = [json.loads(line) for line in (tmp_path / "cyc" / "requests.jsonl").read_text().splitlines()]
    from collections import Counter
    want = Counter(tuple(gts[i][1].size_3d) for i in corrupted)
    got = Counter()
    for r in reqs:
        if r["kind"] == "debris":
            got[tuple(r["size_3d"])] += r["count"]
    ok = perfect_ok and dropped and len(failures) > 0 and got == want
    verdict(capsys, "end-to-end smoke", ok,
            f"{len(gts)} debris labels; perfect buckets {present}, mAP {perfect['map_all']}; "
            f"corrupted {len(corrupted)} -> mAP {bad['map_all']:.2f}, {len(failures)} failures; "
            f"request sizes match={got == want}")
