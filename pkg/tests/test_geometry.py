import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_camera, random_rotation
from lnerf.errors import DomainError
from lnerf.geometry import (Aabb, CameraModel, Ray, Region, SceneBounds, classify_point, classify_points,
                            compute_scene_bounds, frustum_corners, generate_ray, load_poses,
                            ray_aabb_intersect, save_poses)


def test_principal_point_ray_is_optical_axis():
    cam = make_camera()
    ray = generate_ray(cam, cam.cx - 0.5, cam.cy - 0.5)
    np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-15)
    np.testing.assert_array_equal(ray.origin, [0.0, 0.0, 0.0])


def test_single_pixel_camera_ray_is_exact_axis():
    cam = CameraModel(1.0, 1.0, 0.5, 0.5, 1, 1, np.eye(4))
    ray = generate_ray(cam, 0, 0)
    assert tuple(ray.direction) == (0.0, 0.0, 1.0)


def test_translation_moves_origin_only():
    pose = np.eye(4)
    pose[:3, 3] = [1.0, 2.0, 3.0]
    cam = make_camera(pose=pose)
    ray = generate_ray(cam, cam.cx - 0.5, cam.cy - 0.5)
    np.testing.assert_array_equal(ray.origin, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-15)


@pytest.mark.parametrize("px,py", [(-1, 0), (0, -0.01), (64, 0), (0, 48)])
def test_pixel_out_of_bounds(px, py):
    with pytest.raises(DomainError):
        generate_ray(make_camera(), px, py)


@pytest.mark.parametrize("kwargs", [dict(fx=0.0), dict(fy=-1.0), dict(cx=0.0), dict(cy=48.0),
                                    dict(pose=np.diag([2.0, 1.0, 1.0, 1.0]))])
def test_camera_invariants(kwargs):
    with pytest.raises(DomainError):
        make_camera(**kwargs)


def test_ray_invariants():
    with pytest.raises(DomainError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))
    with pytest.raises(DomainError):
        Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 2.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 63.999), st.floats(0, 47.999))
def test_ray_directions_unit_norm(seed, px, py):
    rng = np.random.default_rng(seed)
    pose = np.eye(4)
    pose[:3, :3] = random_rotation(rng)
    pose[:3, 3] = rng.normal(size=3)
    ray = generate_ray(make_camera(pose=pose), px, py)
    assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-9


def test_bounds_of_90_degree_camera():
    # tan(45 deg) = 1: corners at depth 1 reach x, y = +-1
    cam = CameraModel(1.0, 1.0, 1.0, 1.0, 2, 2, np.eye(4))
    b = compute_scene_bounds([cam], 0.0, 1.0, (2.0, 2.0, 2.0))
    np.testing.assert_allclose(b.fg.min, [-1.0, -1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(b.fg.max, [1.0, 1.0, 1.0], atol=1e-12)


def test_bg_is_proportional_enlargement():
    b = SceneBounds.from_fg(Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]), (2.0, 2.0, 2.0))
    np.testing.assert_array_equal(b.bg.min, [-2.0, -2.0, -2.0])
    np.testing.assert_array_equal(b.bg.max, [2.0, 2.0, 2.0])


def test_duplicate_cameras_same_bounds():
    cam = make_camera()
    a = compute_scene_bounds([cam], 0.5, 5.0, (2.0, 2.0, 2.0))
    b = compute_scene_bounds([cam, cam], 0.5, 5.0, (2.0, 2.0, 2.0))
    np.testing.assert_array_equal(a.fg.min, b.fg.min)
    np.testing.assert_array_equal(a.fg.max, b.fg.max)


def test_bounds_errors():
    with pytest.raises(DomainError):
        compute_scene_bounds([], 0.0, 1.0, (2.0, 2.0, 2.0))
    with pytest.raises(DomainError):
        compute_scene_bounds([make_camera()], 1.0, 1.0, (2.0, 2.0, 2.0))
    with pytest.raises((DomainError, ValueError)):
        compute_scene_bounds([make_camera()], 0.0, 1.0, (1.0, 2.0, 2.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_frustum_corners_inside_fg(seed, n_cams):
    rng = np.random.default_rng(seed)
    cams = []
    for _ in range(n_cams):
        pose = np.eye(4)
        pose[:3, :3] = random_rotation(rng)
        pose[:3, 3] = rng.uniform(-5, 5, 3)
        cams.append(make_camera(pose=pose))
    near, far = 0.1, rng.uniform(1.0, 20.0)
    b = compute_scene_bounds(cams, near, far, (1.5, 2.0, 3.0))
    for cam in cams:
        pts = np.vstack([frustum_corners(cam, near, far), cam.position])
        assert np.all(pts >= b.fg.min - 1e-12) and np.all(pts <= b.fg.max + 1e-12)
    np.testing.assert_allclose(b.bg.center, b.fg.center, atol=1e-12)
    np.testing.assert_allclose(b.bg.extent, b.fg.extent * [1.5, 2.0, 3.0], rtol=1e-12)


def test_classify_examples():
    b = SceneBounds.from_fg(Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]), (2.0, 2.0, 2.0))
    assert classify_point(b, [0.0, 0.0, 0.0]) == Region.FOREGROUND
    assert classify_point(b, [1.0, 1.0, 1.0]) == Region.FOREGROUND
    assert classify_point(b, [2.0, 0.0, 0.0]) == Region.BACKGROUND
    assert classify_point(b, [0.0, 2.0 + 1e-9, 0.0]) == Region.OUTSIDE


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_classification_partitions_space(x):
    b = SceneBounds.from_fg(Aabb([-1.0, -0.5, 0.0], [1.0, 0.5, 2.0]), (2.0, 3.0, 2.0))
    region = classify_point(b, x)
    in_fg, in_bg = bool(b.fg.contains(x)), bool(b.bg.contains(x))
    assert region == (Region.FOREGROUND if in_fg else Region.BACKGROUND if in_bg else Region.OUTSIDE)
    if in_fg:
        assert in_bg


def test_slab_example():
    box = Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    assert ray_aabb_intersect(Ray(np.array([0.0, 0.0, -2.0]), np.array([0.0, 0.0, 1.0])), box) == (1.0, 3.0)


def test_slab_parallel_miss_and_inside():
    box = Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    assert ray_aabb_intersect(Ray(np.array([0.0, 2.0, -2.0]), np.array([0.0, 0.0, 1.0])), box) is None
    t0, t1 = ray_aabb_intersect(Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.25), box)
    assert t0 == 0.25 and t1 == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_slab_endpoints_on_boundary(seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-2, 0, 3)
    box = Aabb(lo, lo + rng.uniform(0.1, 3, 3))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    o = box.center - 5 * d + rng.uniform(-0.5, 0.5, 3)
    hit = ray_aabb_intersect(Ray(o, d), box)
    if hit is None or hit[1] - hit[0] < 1e-9:
        return
    for t in hit:
        p = o + t * d
        dist = np.minimum(np.abs(p - box.min), np.abs(p - box.max)).min()
        assert dist < 1e-9
        assert np.all(p >= box.min - 1e-9) and np.all(p <= box.max + 1e-9)


def test_poses_round_trip(tmp_path, rng):
    cams = []
    for _ in range(3):
        pose = np.eye(4)
        pose[:3, :3] = random_rotation(rng)
        pose[:3, 3] = rng.normal(size=3)
        cams.append(make_camera(pose=pose))
    path = tmp_path / "poses.json"
    save_poses(path, cams, ["train", "test", "train"])
    loaded, splits = load_poses(path)
    assert splits == ["train", "test", "train"]
    for a, b in zip(cams, loaded):
        np.testing.assert_array_equal(a.pose, b.pose)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
    first = path.read_bytes()
    save_poses(path, loaded, splits)
    assert path.read_bytes() == first
    assert isinstance(json.loads(first), list)


def test_poses_without_split_default_to_train(tmp_path):
    rec = make_camera().to_record()
    (tmp_path / "p.json").write_text(json.dumps([rec]))
    _, splits = load_poses(tmp_path / "p.json")
    assert splits == ["train"]


def test_shifted_moves_along_camera_left():
    pose = np.eye(4)
    pose[:3, :3] = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])  # looks along world +x
    cam = make_camera(pose=pose)
    moved = cam.shifted((-2.0, 0.0, 0.0))
    np.testing.assert_allclose(moved.position, [0.0, 2.0, 0.0], atol=1e-15)
