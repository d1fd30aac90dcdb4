import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lnerf.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from lnerf.config import DEFAULTS, RunConfig, load_config, parse_config
from lnerf.errors import FormatError, ParseError
from lnerf.geometry import Aabb, SceneBounds
from lnerf.imageio import decode_pgm16, decode_ppm, encode_pgm16, encode_ppm, read_ppm, write_ppm
from lnerf.pipeline import build_scene
from lnerf.renderer import render_rays

SMALL = {"grid.fg_resolution": 8, "grid.bg_resolution": 4, "grid.bg_radial_resolution": 3,
         "grid.log2_table_size": 8, "grid.levels": 2, "sampler.occ_resolution": 8, "render.hidden": 8}


# -- images --------------------------------------------------------------------

def test_ppm_quantizes_and_round_trips(tmp_path, rng):
    img = rng.uniform(-0.2, 1.2, (5, 7, 3))
    path = tmp_path / "a.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    assert back.shape == (5, 7, 3)
    np.testing.assert_allclose(back, np.round(np.clip(img, 0, 1) * 255) / 255, atol=1e-15)
    assert encode_ppm(back) == path.read_bytes()


def test_pgm_round_trip_keeps_scale():
    depth = np.array([[0.0, 1.0, 2.5], [np.inf, 3.0, 0.25]])
    data = encode_pgm16(depth, scale=1000.0)
    back, scale = decode_pgm16(data)
    assert scale == 1000.0
    np.testing.assert_allclose(back, [[0.0, 1.0, 2.5], [0.0, 3.0, 0.25]], atol=1e-12)
    assert encode_pgm16(back, scale) == data


def test_pgm_default_scale_maps_peak_to_full_range():
    back, scale = decode_pgm16(encode_pgm16(np.array([[2.0, 4.0]])))
    assert scale == 65535.0 / 4.0
    np.testing.assert_allclose(back, [[2.0, 4.0]], atol=1.0 / scale)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_image_write_read_write_identical(h, w, seed):
    rng = np.random.default_rng(seed)
    ppm = encode_ppm(rng.uniform(0, 1, (h, w, 3)))
    assert encode_ppm(decode_ppm(ppm)) == ppm
    pgm = encode_pgm16(rng.uniform(0, 30, (h, w)), 2000.0)
    assert encode_pgm16(*decode_pgm16(pgm)) == pgm


def test_ppm_header_comments_accepted():
    data = b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])
    np.testing.assert_array_equal(decode_ppm(data)[0], [[1, 0, 0], [0, 0, 1]])


@pytest.mark.parametrize("data", [b"P5\n1 1\n255\n\x00", b"P6\n2 2\n255\n\x00\x00", b"P6\n1 1\n65535\n" + b"\0" * 6,
                                  b"P6\n1"])
def test_ppm_errors(data):
    with pytest.raises(FormatError):
        decode_ppm(data)


def test_pgm_truncated():
    with pytest.raises(FormatError):
        decode_pgm16(b"P5\n2 2\n65535\n\x00\x01")


# -- checkpoint ----------------------------------------------------------------

def _state(dtype="float64", **over):
    cfg = RunConfig({**SMALL, "grid.dtype": dtype, **over})
    state = build_scene(SceneBounds.from_fg(Aabb([-1, -1, -1], [1, 1, 1])), cfg)
    rng = np.random.default_rng(3)
    state.fg_density.raw[:] = rng.normal(size=state.fg_density.raw.shape)
    state.bg_density.raw[:] = rng.normal(size=state.bg_density.raw.shape)
    state.occupancy.ema[:] = rng.uniform(0, 2, state.occupancy.ema.shape)
    state.occupancy.refresh_bits()
    return state


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_round_trip_identical(tmp_path, dtype):
    state = _state(dtype)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, state)
    back = load_checkpoint(path, dtype=np.dtype(dtype).type)
    assert encode_checkpoint(back) == path.read_bytes()
    # stored as 32-bit floats
    np.testing.assert_array_equal(back.fg_density.raw, state.fg_density.raw.astype(np.float32))
    np.testing.assert_array_equal(back.occupancy.bits, state.occupancy.bits)
    for a, b in zip(back.heads.vd.weights, state.heads.vd.weights):
        np.testing.assert_array_equal(a, b.astype(np.float32))


def test_checkpoint_renders_identically():
    state = _state("float32")
    back = decode_checkpoint(encode_checkpoint(state), dtype=np.float32)
    rng = np.random.default_rng(0)
    o = rng.uniform(-3, 3, (64, 3))
    d = rng.normal(size=(64, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a, b = render_rays(state, o, d), render_rays(back, o, d)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_checkpoint_without_decomposition_round_trips():
    state = _state(no_color_decomp=True)
    data = encode_checkpoint(state)
    back = decode_checkpoint(data, dtype=np.float64)
    assert back.heads.vi is None
    assert encode_checkpoint(back) == data


@pytest.mark.parametrize("cut", [0, 4, 40, -1])
def test_corrupt_checkpoint_rejected(cut):
    data = encode_checkpoint(_state())
    with pytest.raises(FormatError):
        decode_checkpoint(data[:cut] if cut else b"NOTACKPT" + data[8:])


# -- config --------------------------------------------------------------------

def test_config_defaults_and_types(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nscene.dataset = data  # trailing\ntrain.batch_rays = 128\n"
                    "no_lidar_init = true\nrender.fill = 1, 0.5, 0\n")
    cfg = load_config(path)
    assert cfg["train.batch_rays"] == 128 and cfg["no_lidar_init"] is True
    assert cfg["render.fill"] == (1.0, 0.5, 0.0)
    assert cfg.path("scene.dataset") == tmp_path / "data"
    assert cfg["train.lambda_reg"] == DEFAULTS["train.lambda_reg"]


def test_unknown_key_named_with_line():
    with pytest.raises(ParseError) as exc:
        parse_config("train.seed = 1\ntrain.bogus = 3\n")
    assert "train.bogus" in str(exc.value) and exc.value.line == 2


@pytest.mark.parametrize("text", ["train.batch_rays = many", "no_lidar_init = maybe", "bg_mode = sphere",
                                  "just words", "render.fill = 1,2"])
def test_bad_values_rejected(text):
    with pytest.raises(ParseError):
        parse_config(text)


def test_dumps_round_trip():
    cfg = RunConfig({"train.seed": 5, "bg_mode": "none", "scene.enlargement": (3.0, 3.0, 1.5)})
    assert parse_config(cfg.dumps()).values == cfg.values


def test_missing_config_file(tmp_path):
    with pytest.raises(ParseError):
        load_config(tmp_path / "absent.cfg")
