import json
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from conftest import make_record
from debrisaug.scene import (EnvTags, GtObject, LaneSet, ManifestError, load_manifest, save_manifest,
                             stratified_sample)


def _write_images(tmp_path, records):
    os.makedirs(tmp_path / "images", exist_ok=True)
    out = []
    for r in records:
        path = tmp_path / "images" / f"{r.id}.png"
        Image.fromarray(np.zeros((r.height, r.width, 3), np.uint8)).save(path)
        out.append(type(r)(**{**r.__dict__, "image_path": str(path)}))
    return out


@pytest.fixture
def three(tmp_path, calib, lanes):
    recs = [make_record(calib, lanes, gts=[GtObject((10, 20, 30, 40), "vehicle", 12.0, (4, 2, 1.5))], rid="a"),
            make_record(calib, lanes, rid="b", env=EnvTags("urban", "night", "rain", "high")),
            make_record(calib, lanes, gts=[GtObject((1, 2, 3, 4), "debris")], rid="c")]
    recs = _write_images(tmp_path, recs)
    path = tmp_path / "manifest.jsonl"
    save_manifest(recs, path)
    return recs, path


def test_round_trip(three):
    recs, path = three
    loaded = load_manifest(path)
    assert loaded == recs
    save_manifest(loaded, path.parent / "again.jsonl")
    assert (path.parent / "again.jsonl").read_bytes() == path.read_bytes()


def test_manifest_keys_and_relative_paths(three):
    _, path = three
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    for line in lines:
        d = json.loads(line)
        assert set(d) == {"id", "image", "width", "height", "camera", "gt_objects", "lanes", "env"}
        assert d["image"].startswith("images/")
    assert json.loads(lines[0])["gt_objects"][0]["class"] == "vehicle"


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    assert load_manifest(p) == []


def test_bad_bbox_names_record(three):
    _, path = three
    lines = path.read_text().splitlines()
    d = json.loads(lines[1])
    d["gt_objects"] = [{"bbox": [50, 10, 40, 20], "class": "vehicle"}]
    lines[1] = json.dumps(d)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match="'b'"):
        load_manifest(path)


def test_parse_error_has_line_number(three):
    _, path = three
    path.write_text(path.read_text() + "{not json\n")
    with pytest.raises(ManifestError, match=":4:"):
        load_manifest(path)


def test_missing_image(three):
    recs, path = three
    os.remove(recs[0].image_path)
    with pytest.raises(ManifestError, match="image not found"):
        load_manifest(path)
    assert len(load_manifest(path, check_images=False)) == 3


def test_extra_key_rejected(three):
    _, path = three
    d = json.loads(path.read_text().splitlines()[0])
    d["extra"] = 1
    path.write_text(json.dumps(d) + "\n")
    with pytest.raises(ManifestError, match="unexpected keys"):
        load_manifest(path)


def test_bbox_outside_image_rejected(calib, lanes, tmp_path):
    rec = make_record(calib, lanes, gts=[GtObject((900, 10, 1000, 40), "vehicle")], rid="wide")
    rec = _write_images(tmp_path, [rec])[0]
    save_manifest([rec], tmp_path / "m.jsonl")
    with pytest.raises(ManifestError, match="outside image"):
        load_manifest(tmp_path / "m.jsonl")


def test_gt_and_env_invariants():
    with pytest.raises(ValueError):
        GtObject((0, 0, 10, 10), "truck")
    with pytest.raises(ValueError):
        GtObject((0, 0, 10, 10), "vehicle", distance_m=0.0)
    with pytest.raises(ValueError):
        EnvTags("moon", "day", "clear", "low")


def test_lane_invariants():
    with pytest.raises(ValueError):
        LaneSet(ego=((0, 0), (1, 1)))
    with pytest.raises(ValueError, match="self-intersecting"):
        LaneSet(ego=((0, 0), (10, 10), (10, 0), (0, 10)))
    with pytest.raises(ValueError):
        LaneSet(ego=((0, 0), (5, 5), (10, 10)))
    lane = LaneSet(ego=((0, 0), (10, 0), (10, 10), (0, 10)))
    assert lane.contains(5, 5) and lane.contains(10, 5) and not lane.contains(11, 5)


def _bucketed(calib, lanes, sizes):
    envs = [EnvTags("highway", "day", "clear", "low"), EnvTags("urban", "night", "rain", "high"),
            EnvTags("rural", "dawn_dusk", "fog", "med")]
    recs = []
    for b, n in enumerate(sizes):
        recs += [make_record(calib, lanes, rid=f"b{b}_{i:03d}", env=envs[b]) for i in range(n)]
    return recs


def test_stratified_examples(calib, lanes):
    assert len(stratified_sample(_bucketed(calib, lanes, [10]), 3, seed=1)) == 3
    recs = _bucketed(calib, lanes, [5, 1])
    out = stratified_sample(recs, 3, seed=1)
    assert len(out) == 4
    assert out == stratified_sample(list(reversed(recs)), 3, seed=1)
    assert out == sorted(out, key=lambda r: (r.env.key, r.id))
    assert stratified_sample([], 3, seed=0) == []
    with pytest.raises(ValueError):
        stratified_sample(recs, 0, seed=0)


def test_stratified_seed_changes_selection(calib, lanes):
    recs = _bucketed(calib, lanes, [40])
    picks = {tuple(r.id for r in stratified_sample(recs, 5, seed=s)) for s in range(5)}
    assert len(picks) > 1


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.integers(0, 33), min_size=1, max_size=3), per_bucket=st.integers(1, 8),
       seed=st.integers(0, 2**32))
def test_stratified_never_exceeds_per_bucket(calib, lanes, sizes, per_bucket, seed):
    recs = _bucketed(calib, lanes, sizes)
    out = stratified_sample(recs, per_bucket, seed)
    counts = Counter(r.env.key for r in out)
    assert all(c <= per_bucket for c in counts.values())
    assert len(out) == sum(min(per_bucket, n) for n in sizes)
    assert len({r.id for r in out}) == len(out)
