import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lnerf.config import RunConfig
from lnerf.errors import DomainError
from lnerf.geometry import Aabb, SceneBounds
from lnerf.lidar import LidarInitConfig, PointCloud, initialize_from_points
from lnerf.pipeline import build_scene
from lnerf.renderer import (ColorHeads, MlpParams, color_heads, composite, composite_backward, composite_batch,
                            encode_direction, heads_backward, heads_forward, logistic, mlp_backward, mlp_forward,
                            render_rays)


def net(rng, widths, dtype=np.float64):
    p = MlpParams.init(widths, rng, dtype)
    for b in p.biases:
        b[:] = rng.normal(size=b.shape)
    return p


# -- MLPs ------------------------------------------------------------------------

def test_zero_weights_output_final_bias(rng):
    p = net(rng, [5, 8, 3])
    for w in p.weights:
        w[:] = 0.0
    np.testing.assert_array_equal(mlp_forward(p, rng.normal(size=5)), p.biases[-1])


def test_identity_layer():
    p = MlpParams([np.eye(4)], [np.zeros(4)])
    x = np.array([0.0, 1.5, 2.0, 3.25])
    np.testing.assert_array_equal(mlp_forward(p, x), x)


def test_forward_matches_hand_matrix_math(rng):
    p = net(rng, [6, 7, 5, 3])
    x = rng.normal(size=6)
    h = x
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = np.array([sum(h[k] * w[k, j] for k in range(w.shape[0])) + b[j] for j in range(w.shape[1])])
        if i < 2:
            h = np.array([max(v, 0.0) for v in h])
    np.testing.assert_allclose(mlp_forward(p, x), h, rtol=0, atol=1e-12)


def test_dimension_mismatch(rng):
    p = net(rng, [4, 3])
    with pytest.raises(DomainError):
        mlp_forward(p, np.zeros(5))
    _, cache = mlp_forward(p, np.zeros((2, 4)), return_cache=True)
    with pytest.raises(DomainError):
        mlp_backward(p, cache, np.zeros((3, 3)))


def test_zero_upstream_zero_gradients(rng):
    p = net(rng, [4, 6, 2])
    _, cache = mlp_forward(p, rng.normal(size=(3, 4)), return_cache=True)
    g, gx = mlp_backward(p, cache, np.zeros((3, 2)))
    assert all(not a.any() for a in g.arrays()) and not gx.any()


def test_single_layer_outer_product(rng):
    p = net(rng, [4, 3])
    x, up = rng.normal(size=4), rng.normal(size=3)
    _, cache = mlp_forward(p, x, return_cache=True)
    g, gx = mlp_backward(p, cache, up)
    np.testing.assert_allclose(g.weights[0], np.outer(x, up), atol=1e-15)
    np.testing.assert_allclose(gx[0], p.weights[0] @ up, atol=1e-15)


def test_mlp_gradients_finite_difference(rng):
    p = net(rng, [5, 8, 8, 3])
    x = rng.normal(size=(4, 5))
    up = rng.normal(size=(4, 3))
    f = lambda: float(np.sum(mlp_forward(p, x) * up))
    _, cache = mlp_forward(p, x, return_cache=True)
    g, gx = mlp_backward(p, cache, up)
    h = 1e-4
    for arr, garr in zip(p.arrays(), g.arrays()):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            fd = (fp - fm) / (2 * h)
            assert abs(fd - garr[idx]) <= 1e-6 * max(1.0, abs(fd))
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        assert abs((fp - fm) / (2 * h) - gx[idx]) <= 1e-6 * max(1.0, abs(gx[idx]))


# -- heads --------------------------------------------------------------------------

def heads(rng, feat=8, decomposed=True):
    return ColorHeads.init(feat, hidden=16, layers=2, n_freqs=4, decomposed=decomposed, rng=rng,
                           dtype=np.float64)


def test_direction_encoding_layout():
    d = np.array([0.6, 0.0, 0.8])
    enc = encode_direction(d, 2)[0]
    assert enc.shape == (12,)
    np.testing.assert_allclose(enc[:3], np.sin(np.pi * d))
    np.testing.assert_allclose(enc[3:6], np.cos(np.pi * d))
    np.testing.assert_allclose(enc[6:9], np.sin(2 * np.pi * d))


def test_vd_large_negative_vanishes(rng):
    h = heads(rng)
    h.vd.biases[-1][:] = -60.0
    for w in h.vd.weights:
        w[:] = 0.0
    c_vd, c_vi, c = color_heads(h, rng.normal(size=8), [0.0, 0.0, 1.0])
    assert np.all(c_vd < 1e-20)
    np.testing.assert_allclose(c, c_vi, atol=1e-20)


def test_zero_vi_head_is_half(rng):
    h = heads(rng)
    for a in h.vi.arrays():
        a[:] = 0.0
    _, c_vi, _ = color_heads(h, rng.normal(size=8), [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(c_vi, [0.5, 0.5, 0.5])


def test_view_direction_only_reaches_vd(rng):
    h = heads(rng)
    f = rng.normal(size=8)
    a = color_heads(h, f, [1.0, 0.0, 0.0])
    b = color_heads(h, f, [0.0, 0.6, 0.8])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.allclose(a[0], b[0])
    np.testing.assert_allclose(a[2] - b[2], a[0] - b[0], atol=1e-15)


def test_non_unit_direction_rejected(rng):
    with pytest.raises(DomainError):
        color_heads(heads(rng), np.zeros(8), [1.0, 1.0, 0.0])


def test_single_head_without_decomposition(rng):
    h = heads(rng, decomposed=False)
    c_vd, c_vi, c = color_heads(h, rng.normal(size=8), [0.0, 0.0, 1.0])
    assert np.all((c_vd > 0) & (c_vd < 1))
    assert not c_vi.any()
    np.testing.assert_array_equal(c, c_vd)


@pytest.mark.parametrize("decomposed", [True, False])
def test_heads_backward_finite_difference(rng, decomposed):
    h = heads(rng, decomposed=decomposed)
    f = rng.normal(size=(3, 8))
    d = rng.normal(size=(3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    u_vd, u_vi = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))

    def loss():
        c_vd, c_vi, _, _ = heads_forward(h, f, d)
        return float(np.sum(c_vd * u_vd) + np.sum(c_vi * u_vi))

    *_, tape = heads_forward(h, f, d)
    _, _, d_f = heads_backward(h, tape, u_vd, u_vi)
    eps = 1e-5
    for idx in np.ndindex(f.shape):
        old = f[idx]
        f[idx] = old + eps
        lp = loss()
        f[idx] = old - eps
        lm = loss()
        f[idx] = old
        assert abs((lp - lm) / (2 * eps) - d_f[idx]) <= 1e-6 * max(1.0, abs(d_f[idx]))


# -- compositing ---------------------------------------------------------------------

def sample(sigma, delta, t, c_vd=(0.0, 0.0, 0.0), c_vi=(0.0, 0.0, 0.0)):
    return sigma, delta, t, np.asarray(c_vd, float), np.asarray(c_vi, float)


def test_opaque_single_sample():
    out = composite([sample(20.0, 1.0, 2.0, c_vi=(0.2, 0.4, 0.6))])
    assert out.opacity == pytest.approx(1 - np.exp(-20.0), abs=1e-15)
    np.testing.assert_allclose(out.rgb, [0.2, 0.4, 0.6], atol=1e-8)
    assert out.depth == pytest.approx(2.0, abs=1e-8)


def test_transparent_samples():
    out = composite([sample(0.0, 0.5, 1.0, c_vi=(1, 1, 1)), sample(0.0, 0.5, 1.5, c_vi=(1, 1, 1))])
    assert out.opacity == 0.0 and not out.rgb.any()


def test_empty_ray_is_fill():
    out = composite([])
    assert out.opacity == 0.0 and out.n_samples == 0
    np.testing.assert_array_equal(out.rgb, [0.0, 0.0, 0.0])


def test_two_sample_hand_evaluation():
    c1, c2 = np.array([0.9, 0.1, 0.3]), np.array([0.2, 0.7, 0.5])
    s2 = 0.8
    out = composite([sample(np.log(2.0), 1.0, 1.0, c_vi=c1), sample(s2 / 0.5, 0.5, 2.0, c_vi=c2)])
    expected = 0.5 * c1 + 0.5 * (1 - np.exp(-s2)) * c2
    np.testing.assert_allclose(out.rgb, expected, atol=1e-15)


def test_negative_inputs_rejected():
    with pytest.raises(DomainError):
        composite([sample(-1.0, 1.0, 1.0)])
    with pytest.raises(DomainError):
        composite([sample(1.0, -1.0, 1.0)])


def test_clamp_only_at_ray_output():
    out = composite([sample(30.0, 1.0, 1.0, c_vd=(0.8, 0.0, 0.0), c_vi=(0.7, 0.2, 0.1))])
    assert out.rgb[0] == 1.0
    assert out.rgb_vd[0] + out.rgb_vi[0] == pytest.approx(1.5, abs=1e-9)


def test_single_sample_color_gradient():
    _, d_c = composite_backward([sample(0.7, 0.5, 1.0, c_vi=(0.1, 0.2, 0.3))], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(d_c[0], 1 - np.exp(-0.35), atol=1e-15)


def test_zero_upstream():
    d_s, d_c = composite_backward([sample(0.7, 0.5, 1.0, c_vi=(0.1, 0.2, 0.3))] * 2, [0.0, 0.0, 0.0])
    assert not d_s.any() and not d_c.any()


def test_sigma_gradient_finite_difference(rng):
    sig = rng.uniform(0.1, 2.0, 5)
    dl = rng.uniform(0.05, 0.3, 5)
    cs = rng.uniform(0.0, 0.15, (5, 3))
    up = rng.normal(size=3)

    def loss(s):
        return float(composite([sample(s[i], dl[i], i + 1.0, c_vi=cs[i]) for i in range(5)]).rgb @ up)

    d_s, d_c = composite_backward([sample(sig[i], dl[i], i + 1.0, c_vi=cs[i]) for i in range(5)], up)
    h = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        fd = (loss(sig + e) - loss(sig - e)) / (2 * h)
        assert abs(fd - d_s[i]) <= 1e-6 * max(1e-3, abs(fd))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_weights_bounded_and_decomposition_linear(seed):
    rng = np.random.default_rng(seed)
    n_rays = 20
    counts = rng.integers(0, 30, n_rays)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    n = offsets[-1]
    sigma = rng.exponential(3.0, n)
    delta = rng.uniform(0.01, 0.5, n)
    t = np.arange(n, dtype=float)
    c_vd, c_vi = rng.uniform(0, 0.6, (n, 3)), rng.uniform(0, 1, (n, 3))
    res = composite_batch(offsets, sigma, delta, t, c_vd, c_vi)
    sums = np.bincount(np.repeat(np.arange(n_rays), counts), weights=res.weights, minlength=n_rays)
    assert np.all(sums <= 1 + 1e-9)
    np.testing.assert_allclose(sums, res.opacity, atol=1e-12)
    whole = composite_batch(offsets, sigma, delta, t, c_vd + c_vi, np.zeros_like(c_vi))
    np.testing.assert_allclose(res.rgb_vd + res.rgb_vi, whole.rgb_vd, atol=1e-12)


def test_homogeneous_segment_opacity():
    # constant density on [0, s] with fine quadrature
    s, sigma_c, n = 1.3, 2.0, 4096
    dt = s / n
    res = composite_batch(np.array([0, n]), np.full(n, sigma_c), np.full(n, dt), np.arange(n) * dt,
                          np.zeros((n, 3)), np.zeros((n, 3)))
    assert res.opacity[0] == pytest.approx(1 - np.exp(-sigma_c * s), abs=1e-3)


# -- batched rendering ----------------------------------------------------------------

def small_scene(rng=None, **over):
    cfg = RunConfig({"grid.fg_resolution": 32, "grid.bg_resolution": 8, "grid.bg_radial_resolution": 4,
                     "grid.log2_table_size": 12, "grid.levels": 3, "sampler.occ_resolution": 32,
                     "sampler.n_bg": 8, "render.hidden": 16, "grid.dtype": "float64", **over})
    bounds = SceneBounds.from_fg(Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]), (2.0, 2.0, 2.0))
    return build_scene(bounds, cfg, seed=0)


def test_missing_ray_is_fill():
    st_ = small_scene()
    st_.occupancy.fill()
    out = render_rays(st_, np.array([[5.0, 5.0, 5.0]]), np.array([[1.0, 0.0, 0.0]]))
    assert out.opacity[0] == 0.0 and out.n_samples[0] == 0
    np.testing.assert_array_equal(out.rgb[0], [0.0, 0.0, 0.0])


def test_lidar_wall_depth():
    st_ = small_scene()
    ys, zs = np.meshgrid(np.linspace(-0.9, 0.9, 60), np.linspace(-0.9, 0.9, 60))
    wall_x = 0.37
    pts = np.stack([np.full(ys.size, wall_x), ys.ravel(), zs.ravel()], axis=1)
    initialize_from_points(PointCloud(pts), st_.bounds, st_.fg_density, st_.bg_density, st_.occupancy,
                           LidarInitConfig(1e3))
    rng = np.random.default_rng(0)
    origins = np.stack([np.full(50, -1.5), rng.uniform(-0.5, 0.5, 50), rng.uniform(-0.5, 0.5, 50)], axis=1)
    dirs = np.tile([1.0, 0.0, 0.0], (50, 1))
    out = render_rays(st_, origins, dirs)
    voxel = st_.fg_density.voxel_size.max()
    truth = wall_x - origins[:, 0]
    assert np.all(np.abs(out.depth - truth) <= 2 * voxel)
    assert np.all(out.opacity > 0.999)


def test_eval_render_bitwise_repeatable():
    st_ = small_scene()
    st_.occupancy.fill()
    rng = np.random.default_rng(2)
    o = rng.uniform(-1.5, 1.5, (64, 3))
    d = rng.normal(size=(64, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a, b = render_rays(st_, o, d), render_rays(st_, o, d)
    for name in ("rgb", "rgb_vd", "rgb_vi", "depth", "opacity", "n_samples"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_train_mode_keeps_tape():
    st_ = small_scene()
    st_.occupancy.fill()
    o = np.array([[-1.5, 0.1, 0.2], [-1.5, -0.3, 0.0]])
    d = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    out = render_rays(st_, o, d, mode="train", seed=4, iteration=7)
    assert out.tape is not None and out.tape.samples.ray_count == 2
    with pytest.raises(DomainError):
        render_rays(st_, o, d, mode="fast")


def test_unclamped_identity_per_ray():
    st_ = small_scene()
    st_.occupancy.fill()
    st_.fg_density.raw[:] = 1.0
    rng = np.random.default_rng(5)
    o = rng.uniform(-1.0, 1.0, (32, 3))
    d = rng.normal(size=(32, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    out = render_rays(st_, o, d, mode="train")
    comp = out.tape.comp
    np.testing.assert_allclose(comp.rgb_raw, comp.rgb_vd + comp.rgb_vi, atol=1e-12)
    assert np.all(logistic(np.array([-800.0, 800.0])) == [0.0, 1.0])
