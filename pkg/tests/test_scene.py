import math

import numpy as np
import pytest

from rar.geometry import PlanarPose4, Twist
from rar.scene import (
    CLOSED,
    OPEN,
    LibraryError,
    ObjectLibrary,
    ObjectSpec,
    TaskError,
    build_object,
    check_success,
    default_library,
    perturb,
    render,
    sample_test_pose,
    set_gripper,
    setup_world,
    step,
    with_ee,
)
from rar.scene.world import START_HEIGHT, ee_pose


@pytest.fixture(scope="module")
def lib():
    return default_library()


def test_library_split_sizes(lib):
    assert [len(lib.split(s)) for s in ("train", "intra", "inter")] == [6, 6, 3]
    train_classes = {o.class_id for o in lib.train}
    assert {o.class_id for o in lib.intra} == train_classes
    assert not train_classes & {o.class_id for o in lib.inter}


def test_library_is_seeded(lib):
    again = default_library()
    assert again.to_json() == lib.to_json()
    assert default_library(8).to_json() != lib.to_json()


def test_library_json_roundtrip(lib, tmp_path):
    p = tmp_path / "lib.json"
    lib.save(p)
    back = ObjectLibrary.load(p)
    assert back.to_json() == lib.to_json()


def test_spec_json_roundtrip(lib):
    for _, spec in lib.all():
        assert ObjectSpec.from_json(spec.to_json()).to_json() == spec.to_json()


def test_unknown_class_rejected():
    with pytest.raises(LibraryError):
        build_object("spaceship")


def test_perturb_keeps_class_and_changes_size(lib):
    base = lib.train[0]
    p = perturb(base, np.random.default_rng(0), "variant")
    assert p.class_id == base.class_id and p.task == base.task
    assert p.param_dict != base.param_dict
    for k, v in base.params:
        assert 0.85 * v - 1e-12 <= p.param_dict[k] <= 1.15 * v + 1e-12


def test_render_shapes_and_types(lib):
    o = render(setup_world(lib.train[0], PlanarPose4(0, 0, 0, 0)))
    assert o.rgb.shape == (128, 128, 3) and o.rgb.dtype == np.uint8
    assert o.depth.shape == (128, 128) and o.depth.dtype == np.float32


def test_render_is_deterministic(lib):
    w = setup_world(lib.train[1], PlanarPose4(0.02, -0.03, 0, 0.4))
    assert render(w).same_pixels(render(w))


def test_depth_matches_object_height(lib):
    # top-down camera at the start height: nearest object pixel sits at height - object top
    spec = lib.train[0]
    o, ids = render(setup_world(spec, PlanarPose4(0.1, 0.05, 0, 0)), with_ids=True)
    top = spec.aabb()[1][2]
    assert set(np.unique(ids)) == {-1, 0}
    assert o.depth[ids == 0].min() == pytest.approx(START_HEIGHT - top, abs=1e-6)
    assert o.depth[ids == -1].max() == pytest.approx(START_HEIGHT, abs=1e-6)


def test_render_noise_is_seeded(lib):
    w = setup_world(lib.train[0], PlanarPose4(0, 0, 0, 0))
    a = render(w, noise_sigma=2.0, rng=np.random.default_rng(1))
    b = render(w, noise_sigma=2.0, rng=np.random.default_rng(1))
    assert a.same_pixels(b)
    assert not a.same_pixels(render(w))


def test_grasp_success_requires_lift(lib):
    spec = next(o for o in lib.train if o.task == "grasp")
    w = setup_world(spec, PlanarPose4(0, 0, 0, 0))
    site = np.asarray(spec.grasp_site)
    w = with_ee(w, ee_pose(site[0], site[1], site[2]))
    w = set_gripper(w, CLOSED)
    assert w.attached == 0
    assert not check_success(w, "grasp")
    up = Twist((0.0, 0.0, 0.2), (0.0, 0.0, 0.0))
    for _ in range(12):
        w = step(w, up, 0.05)
    assert check_success(w, "grasp")
    w = set_gripper(w, OPEN)
    assert w.attached is None and not check_success(w, "grasp")


def test_closing_on_nothing_attaches_nothing(lib):
    w = setup_world(lib.train[0], PlanarPose4(0, 0, 0, 0))
    assert set_gripper(w, CLOSED).attached is None


def test_unknown_task_rejected(lib):
    with pytest.raises(TaskError):
        check_success(setup_world(lib.train[0], PlanarPose4(0, 0, 0, 0)), "juggle")


def test_insert_tasks_start_holding(lib):
    for spec in lib.train:
        w = setup_world(spec, PlanarPose4(0, 0, 0, 0))
        held = spec.task in ("insert_cap", "insert_bread")
        assert (w.gripper == CLOSED) == held
        assert (w.attached is not None) == held


def test_sample_test_pose_bounds(lib):
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = sample_test_pose(lib.train[0], rng)
        assert abs(p.x) <= 0.08 and abs(p.y) <= 0.08 and abs(p.theta_z) <= math.pi / 4
