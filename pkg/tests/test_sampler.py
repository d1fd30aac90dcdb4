import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lnerf.geometry import Aabb, Ray, SceneBounds, slab_intervals
from lnerf.sampler import (BACKGROUND, FOREGROUND, OccupancyGrid, jitter_for, march_background,
                           march_foreground, march_rays, update_occupancy)


def unit_bounds():
    return SceneBounds.from_fg(Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]), (2.0, 2.0, 2.0))


def grid(res=8, step=0.1, **kw):
    return OccupancyGrid(unit_bounds(), res, step=step, **kw)


def ray(origin, direction):
    d = np.asarray(direction, dtype=np.float64)
    return Ray(np.asarray(origin, dtype=np.float64), d / np.linalg.norm(d))


# -- foreground --------------------------------------------------------------

def test_clear_grid_gives_no_samples():
    occ = grid()
    r = ray([-3, 0.1, 0.2], [1, 0, 0])
    assert march_foreground(r, unit_bounds(), occ, 0.1) == []
    assert march_background(r, unit_bounds(), occ, 16) == []


def test_single_occupied_voxel():
    occ = grid(res=8)
    occ.mark([[0.25, 0.25, 0.25]], 1e6)      # voxel [0, 0.5]^3
    s = occ.voxel_size[0]
    samples = march_foreground(ray([-3, 0.25, 0.25], [1, 0, 0]), unit_bounds(), occ, 0.1)
    assert abs(len(samples) - math.floor(s / 0.1)) <= 1
    for p in samples:
        assert np.all(p.position >= 0.0) and np.all(p.position <= 0.5)
        assert p.delta == 0.1 and p.segment == FOREGROUND


@pytest.mark.parametrize("step", [0.1, 0.07, 0.013])
def test_full_grid_count(step):
    occ = grid()
    occ.fill()
    r = ray([-3, 0.3, -0.2], [1, 0.2, 0.1])
    t0, t1 = slab_intervals(r.origin[None], r.direction[None], -np.ones(3), np.ones(3))
    t = (t0[0], t1[0])
    samples = march_foreground(r, unit_bounds(), occ, step)
    assert abs(len(samples) - math.floor((t[1] - t[0]) / step)) <= 1


def test_training_jitter_shifts_lattice():
    occ = grid()
    occ.fill()
    r = ray([-3, 0.1, 0.1], [1, 0, 0])
    a = march_foreground(r, unit_bounds(), occ, 0.1, jitter=0.0)
    b = march_foreground(r, unit_bounds(), occ, 0.1, jitter=0.25)
    assert a[0].t == pytest.approx(2.0)
    assert b[0].t == pytest.approx(2.025)


# -- background --------------------------------------------------------------

def test_zero_background_samples():
    occ = grid()
    occ.fill()
    assert march_background(ray([0, 0, 0], [1, 0, 0]), unit_bounds(), occ, 0) == []


def test_radial_inverse_radius_placement():
    occ = grid()
    occ.fill()
    samples = march_background(ray([0, 0, 0], [1, 0, 0]), unit_bounds(), occ, 2)
    # 1/r bins (0.5, 0.75] and (0.75, 1]: samples at bin starts r = 1 and 4/3
    assert [s.t for s in samples] == pytest.approx([1.0, 4.0 / 3.0], abs=1e-12)
    assert [s.delta for s in samples] == pytest.approx([1.0 / 3.0, 2.0 / 3.0], abs=1e-12)
    assert all(s.segment == BACKGROUND for s in samples)


def test_background_filtered_by_occupancy():
    occ = grid()
    occ.mark([[1.2, 0.01, 0.01]], 1e6)
    samples = march_background(ray([0, 0.01, 0.01], [1, 0, 0]), unit_bounds(), occ, 8)
    assert samples
    assert all(occ.is_occupied(s.position[None])[0] for s in samples)
    assert len(samples) < 8


# -- occupancy maintenance ------------------------------------------------------

def test_zero_density_clears_everything():
    occ = grid()
    occ.fill()
    for it in range(0, 16 * 200, 16):
        update_occupancy(occ, lambda x: np.zeros(len(x)), it)
    assert not occ.bits.any()


def test_high_density_sets_bit_after_one_update():
    occ = grid()
    target = occ.voxel_indices([[0.3, 0.3, 0.3]])[0]
    center = occ.voxel_centers(np.array([target]))[0]
    density = lambda x: np.where(np.all(np.abs(x - center) <= occ.voxel_size / 2, axis=1), 1e4, 0.0)
    assert update_occupancy(occ, density, 0)
    assert occ.bits[target] and occ.bits.sum() == 1


def test_update_only_on_interval():
    occ = grid()
    assert not update_occupancy(occ, lambda x: np.full(len(x), 1e4), 5)
    assert not occ.bits.any()
    assert update_occupancy(occ, lambda x: np.full(len(x), 1e4), 32)
    assert occ.bits.all()


@pytest.mark.parametrize("ema0", [50.0, 1e3, 7.5])
def test_decay_clear_time(ema0):
    occ = grid(step=0.1)
    occ.fill(ema0)
    eps = occ.occ_threshold / occ.step
    expected = math.ceil(math.log(eps / ema0) / math.log(occ.decay))
    n = 0
    while occ.bits.any():
        update_occupancy(occ, lambda x: np.zeros(len(x)), 0)
        n += 1
    assert n == expected


def test_bits_follow_ema_threshold():
    occ = grid(step=0.1)
    occ.ema[:] = np.linspace(0, 0.2, occ.n_voxels)
    occ.refresh_bits()
    np.testing.assert_array_equal(occ.bits, occ.ema.astype(np.float64) * 0.1 > 0.01)
    with pytest.raises(ValueError):
        grid(decay=1.0)


# -- batch properties -------------------------------------------------------------

def random_rays(rng, n):
    o = rng.uniform(-3, 3, (n, 3))
    d = rng.normal(size=(n, 3))
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.9))
def test_batch_invariants(seed, fill_fraction):
    rng = np.random.default_rng(seed)
    occ = grid(res=16, step=0.05)
    occ.bits[:] = rng.random(occ.n_voxels) < fill_fraction
    o, d = random_rays(rng, 40)
    batch = march_rays(o, d, unit_bounds(), occ, n_bg=16, jitter=rng.random(40))
    assert np.all(np.diff(batch.offsets) >= 0)
    assert batch.offsets[-1] == batch.sample_count
    if batch.sample_count:
        assert np.all(occ.is_occupied(batch.positions))
        assert np.all(batch.delta > 0)
    for r in range(batch.ray_count):
        s, e = batch.offsets[r], batch.offsets[r + 1]
        assert np.all(batch.ray_ids[s:e] == r)
        assert np.all(np.diff(batch.t[s:e]) > 0)
        seg = batch.is_bg[s:e]
        pos = batch.positions[s:e]
        inside_fg = np.all(np.abs(pos) <= 1.0 + 1e-9, axis=1)
        assert np.all(inside_fg[~seg])
        # foreground samples come before background samples leaving the box
        if seg.any() and (~seg).any():
            last_fg = np.flatnonzero(~seg).max()
            assert np.all(batch.t[s:e][seg & (np.arange(e - s) > last_fg)] > batch.t[s + last_fg])


def test_eval_sampling_deterministic(rng):
    occ = grid(res=16)
    occ.bits[:] = rng.random(occ.n_voxels) < 0.3
    o, d = random_rays(rng, 64)
    a = march_rays(o, d, unit_bounds(), occ)
    b = march_rays(o, d, unit_bounds(), occ)
    for name in ("offsets", "positions", "t", "delta", "is_bg", "ray_ids"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_overflowing_guess_is_rerun():
    occ = grid(res=8)
    occ.fill()
    o, d = random_rays(np.random.default_rng(3), 4)
    o[:] = [-3.0, 0.0, 0.0]
    d[:] = [1.0, 0.0, 0.0]
    batch = march_rays(o, d, unit_bounds(), occ, step=0.001, n_bg=4)
    assert batch.sample_count > 128 * 4
    assert np.all(np.diff(batch.offsets) == batch.offsets[1])


def test_jitter_depends_only_on_ray_id():
    a = jitter_for(3, 10, np.array([5, 1, 9]))
    b = jitter_for(3, 10, np.array([9, 5]))
    assert a[0] == b[1] and a[2] == b[0]
    assert np.all((a >= 0) & (a < 1))
    assert not np.array_equal(jitter_for(3, 11, np.array([5])), a[:1])
