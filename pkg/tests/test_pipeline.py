import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from itmkit import pipeline as P
from itmkit.errors import FormatError

unit = st.floats(0.0, 1.0, allow_nan=False)
hdr_values = st.floats(0.0, 1e4, allow_nan=False)


def const(value, shape=(4, 4, 3)):
    return np.full(shape, value, dtype=np.float64)


# --- clip / CRF / quantise -------------------------------------------------------

@pytest.mark.parametrize("v,expected", [(2.5, 1.0), (0.3, 0.3), (1.0, 1.0)])
def test_clip(v, expected):
    assert P.clip_dynamic_range(np.array([v]))[0] == expected


def test_clip_rejects_negative():
    with pytest.raises(ValueError):
        P.clip_dynamic_range(np.array([-0.1]))


def test_identity_curve_is_identity():
    x = np.linspace(0, 1, 37)
    np.testing.assert_allclose(P.apply_crf(x, P.identity_curve()), x, atol=1e-15)


def test_gamma_curve_value():
    # 0.25 ** (1 / 2.2) by hand: exp(ln(0.25) / 2.2) = exp(-0.630134) = 0.53255
    assert P.gamma_curve(2.2)(0.25) == pytest.approx(0.5326, abs=1e-3)
    assert P.gamma_curve(2.2)(0.25) == pytest.approx(0.25 ** (1 / 2.2), abs=1e-6)


def test_curve_endpoints():
    for c in P.gamma_family(5) + [P.identity_curve()]:
        assert c(0.0) == 0.0 and c(1.0) == 1.0
        assert c.samples.size == P.CURVE_SAMPLES


def test_curve_rejects_non_monotone():
    s = np.linspace(0, 1, 16)
    s[5] = 0.9
    with pytest.raises(ValueError, match="bent"):
        P.ResponseCurve("bent", s)


def test_quantize_values():
    np.testing.assert_array_equal(P.quantize8(np.array([0.0, 1.0])), [0.0, 1.0])
    assert P.quantize8(np.array([0.5]))[0] == 128 / 255
    assert P.quantize8(np.array([0.5]))[0] == pytest.approx(0.501961, abs=1e-6)


@settings(max_examples=200)
@given(arrays(np.float64, 16, elements=unit))
def test_quantize_idempotent_and_bounded(v):
    q = P.quantize8(v)
    np.testing.assert_array_equal(P.quantize8(q), q)
    assert np.all(np.abs(q - v) <= 1 / 510 + 1e-12)
    assert P.is_quantized(q)


@settings(max_examples=100)
@given(arrays(np.float64, 32, elements=hdr_values))
def test_decomposition_identity(h):
    c = P.clip_dynamic_range(h)
    r = h - c
    np.testing.assert_array_equal(c + r, h)
    assert np.all(r[h <= 1] == 0)
    assert np.all((0 <= c) & (c <= 1))


@settings(max_examples=100)
@given(arrays(np.float64, 32, elements=unit), st.floats(1.8, 2.6))
def test_stages_preserve_range_and_order(x, g):
    y = P.apply_crf(x, P.gamma_curve(g))
    assert np.all((0 <= y) & (y <= 1))
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(y[order]) >= 0)
    q = P.quantize8(y)
    assert np.all((0 <= q) & (q <= 1))


# --- noise -------------------------------------------------------------------------

def test_zero_noise_is_identity():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    np.testing.assert_array_equal(P.add_noise(img, P.NoiseParams(0.0, 0.0, 3)), img)


def test_noise_variance_statistics():
    img = np.full((1000, 1000), 0.5)
    out = P.add_noise(img, P.NoiseParams(0.013, 0.005, seed=11))
    expected = 0.5 * 0.013 ** 2 + 0.005 ** 2
    assert abs(out.var() - expected) / expected < 0.05


def test_dark_pixels_without_constant_noise_unchanged():
    img = np.zeros((16, 16, 3))
    img[0, 0] = 0.5
    out = P.add_noise(img, P.NoiseParams(0.013, 0.0, seed=2))
    assert np.all(out.reshape(-1, 3)[1:] == 0)


def test_noise_params_ranges():
    with pytest.raises(ValueError):
        P.NoiseParams(0.02, 0.0)
    with pytest.raises(ValueError):
        P.NoiseParams(0.0, 0.006)
    p = P.NoiseParams.sample(np.random.default_rng(0))
    assert 0 <= p.sigma_s <= 0.013 and 0 <= p.sigma_c <= 0.005


# --- JPEG ---------------------------------------------------------------------------

def test_jpeg_uniform_quality_100():
    img = np.full((16, 16, 3), 100 / 255)
    out = P.jpeg_round_trip(img, 100)
    assert np.max(np.abs(out - img)) <= 1 / 255 + 1e-12
    assert P.is_quantized(out)


def test_jpeg_pass_through_and_lattice():
    img = P.quantize8(np.random.default_rng(1).uniform(size=(16, 16, 3)))
    np.testing.assert_array_equal(P.jpeg_round_trip(img, 90, enabled=False), img)
    assert P.is_quantized(P.jpeg_round_trip(img, 85))
    with pytest.raises(ValueError):
        P.jpeg_round_trip(img, 50)


def test_jpeg_without_codec_warns(monkeypatch, caplog):
    import builtins

    real_import = builtins.__import__

    def fake_import(name, *a, **kw):
        if name == "PIL" or name.startswith("PIL."):
            raise ImportError("no PIL")
        return real_import(name, *a, **kw)

    monkeypatch.setattr(builtins, "__import__", fake_import)
    img = P.quantize8(np.random.default_rng(1).uniform(size=(8, 8, 3)))
    with caplog.at_level(logging.WARNING):
        out = P.jpeg_round_trip(img, 90)
    np.testing.assert_array_equal(out, img)
    assert "unavailable" in caplog.text


# --- exposures ------------------------------------------------------------------------

def test_exposure_grid_endpoints():
    ts = P.sample_exposures(60, -3, 3)
    assert len(ts) == 60
    assert ts[0] == 0.125 and ts[-1] == 8.0


def test_exposure_grid_small_cases():
    assert P.sample_exposures(2, 0, 0) == [1.0, 1.0]
    np.testing.assert_allclose(P.sample_exposures(3, -1, 1), [0.5, 1.0, 2.0], rtol=1e-15)
    with pytest.raises(ValueError):
        P.sample_exposures(1)


@settings(max_examples=50)
@given(st.integers(2, 80), st.floats(-4, 0), st.floats(0, 4))
def test_exposure_grid_log_uniform(n, lo, hi):
    ts = np.log2(P.sample_exposures(n, lo, hi))
    np.testing.assert_allclose(np.diff(ts), (hi - lo) / (n - 1), atol=1e-9)


# --- response curve files ----------------------------------------------------------------

def _dorf_text(n):
    curves = [P.gamma_curve(1.5 + i * 0.01) for i in range(n)]
    return P.format_dorf(curves, points=64)


def test_dorf_201_and_training_subset():
    curves = P.parse_dorf(_dorf_text(201))
    assert len(curves) == 201
    train, test = P.split_curves(curves)
    assert len(train) == 171 and len(test) == 30
    assert train[0].name == curves[0].name


def test_dorf_three_line_layout():
    text = "myCurve\n0 0.5 1\n0 0.7 1\nother\n0 1\n0 1\n"
    curves = P.parse_dorf(text)
    assert [c.name for c in curves] == ["myCurve", "other"]
    assert curves[0](0.5) == pytest.approx(0.7, abs=1e-3)


def test_dorf_rejects_bad_curve_by_name():
    text = "broken\n0 0.5 1\n0 0.8 0.6\n"
    with pytest.raises(FormatError, match="broken"):
        P.parse_dorf(text)
    with pytest.raises(FormatError, match="outside"):
        P.parse_dorf("big\n0 1\n0 1.5\n")


def test_dorf_file_round_trip(tmp_path):
    path = tmp_path / "dorf.txt"
    path.write_text(_dorf_text(3))
    curves = P.load_response_curves(path)
    assert len(curves) == 3
    np.testing.assert_allclose(curves[1](0.25), 0.25 ** (1 / 1.51), atol=2e-3)


def test_parametric_family():
    curves = P.load_response_curves("gamma", count=7, seed=0)
    assert len(curves) == 7
    gam = [float(c.name[5:]) for c in curves]
    assert all(1.8 <= g <= 2.6 for g in gam)
    assert P.load_response_curves("gamma", count=3, seed=4)[0].name == \
        P.load_response_curves("gamma", count=3, seed=4)[0].name


# --- full composition ------------------------------------------------------------------

def test_no_clipping_composition():
    h = np.random.default_rng(0).uniform(0, 0.9, size=(8, 8, 3))
    pair = P.synthesize_pair(h, 1.0, P.identity_curve())
    np.testing.assert_array_equal(pair.ldr, P.quantize8(h))
    assert np.all(pair.bright == 0)


def test_constant_four():
    pair = P.synthesize_pair(const(4.0), 1.0, P.identity_curve())
    assert np.all(pair.ldr == 1.0)
    assert np.all(pair.bright == 3.0)
    np.testing.assert_array_equal(pair.hdr, const(4.0))


def test_synthesis_deterministic():
    h = np.random.default_rng(0).uniform(0, 3, size=(16, 16, 3))
    noise = P.NoiseParams(0.01, 0.003, seed=9)
    a = P.synthesize_pair(h, 0.7, P.gamma_curve(2.0), noise, 90)
    b = P.synthesize_pair(h, 0.7, P.gamma_curve(2.0), noise, 90)
    assert a.ldr.tobytes() == b.ldr.tobytes()


def test_image_rng_streams_independent_of_order():
    a = P.image_rng(5, 3).uniform(size=4)
    P.image_rng(5, 1).uniform(size=10)
    np.testing.assert_array_equal(a, P.image_rng(5, 3).uniform(size=4))
    assert not np.array_equal(a, P.image_rng(5, 4).uniform(size=4))


def test_synthesis_rejects_bad_inputs():
    with pytest.raises(ValueError):
        P.synthesize_pair(const(-1.0), 1.0, P.identity_curve())
    with pytest.raises(ValueError):
        P.synthesize_pair(const(1.0), 0.0, P.identity_curve())


def test_naive_expand():
    np.testing.assert_array_equal(P.naive_expand(np.array([0.0, 0.5, 1.0])), [0.0, 0.25, 1.0])


@settings(max_examples=50)
@given(arrays(np.float64, 16, elements=unit))
def test_naive_expand_monotone(x):
    s = np.sort(x)
    assert np.all(np.diff(P.naive_expand(s)) >= 0)


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        P.PipelineConfig(exposures=[1.0, -1.0])
    with pytest.raises(ValueError):
        P.PipelineConfig(jpeg_quality=(70, 100))
    cfg = P.PipelineConfig()
    assert len(cfg.exposures) == 60
