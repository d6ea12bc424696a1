import pytest

from debrisaug.geometry import CameraCalib
from debrisaug.scene import EnvTags, GtObject, LaneSet, SceneRecord
from debrisaug.synthetic import DEMO_SIZE, demo_calib, demo_lanes, make_catalog, make_demo_dataset


@pytest.fixture(scope="session")
def calib() -> CameraCalib:
    return demo_calib()


@pytest.fixture(scope="session")
def lanes(calib) -> LaneSet:
    return demo_lanes(calib)


@pytest.fixture(scope="session")
def catalog():
    return make_catalog()


def make_record(calib, lanes, gts=(), rid="r0", env=None, image_path="/nonexistent.png") -> SceneRecord:
    return SceneRecord(id=rid, image_path=image_path, width=DEMO_SIZE[0], height=DEMO_SIZE[1],
                       camera=calib, gt_objects=tuple(gts), lanes=lanes,
                       env=env or EnvTags("highway", "day", "clear", "low"))


@pytest.fixture
def record(calib, lanes):
    return make_record(calib, lanes)


@pytest.fixture(scope="session")
def demo_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    return make_demo_dataset(str(root), n_images=10, seed=3)


def debris(bbox, size_3d=None, distance_m=None) -> GtObject:
    return GtObject(bbox=tuple(float(v) for v in bbox), category="debris", distance_m=distance_m, size_3d=size_3d)
