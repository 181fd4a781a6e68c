import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from itmkit import hdrio as IO
from itmkit.errors import FormatError

HEADER = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n"


def test_rgbe_hand_value():
    np.testing.assert_array_equal(IO.rgbe_encode(np.array([1.0, 1.0, 1.0])), [128, 128, 128, 129])
    np.testing.assert_array_equal(IO.rgbe_encode(np.zeros(3)), [0, 0, 0, 0])
    assert IO.rgbe_decode(np.array([0, 0, 0, 0], dtype=np.uint8)).tolist() == [0, 0, 0]


@settings(max_examples=200)
@given(arrays(np.float64, (5, 3), elements=st.floats(1e-3, 1e6)))
def test_rgbe_relative_error(rgb):
    back = IO.rgbe_decode(IO.rgbe_encode(rgb)).astype(np.float64)
    peak = rgb.max(axis=1, keepdims=True)
    assert np.all(np.abs(back - rgb) / peak <= 1 / 256 + 1e-6)


@pytest.mark.parametrize("width", [4, 37, 300])
def test_hdr_round_trip(tmp_path, width):
    rng = np.random.default_rng(width)
    img = rng.uniform(0, 50, (7, width, 3))
    img[:, : width // 2] = 2.0  # long runs exercise RLE
    IO.write_hdr(tmp_path / "x.hdr", img)
    back = IO.read_hdr(tmp_path / "x.hdr")
    assert back.shape == img.shape
    direct = IO.rgbe_decode(IO.rgbe_encode(img))
    np.testing.assert_array_equal(back, direct)


def test_rle_channel_encoding():
    data = bytes([5, 5, 5, 5, 1, 2, 9, 9, 9])
    enc = IO._rle_encode_channel(data)
    assert enc == bytes([132, 5, 2, 1, 2, 131, 9])


def test_old_style_rle():
    px = bytes([128, 64, 32, 129])
    body = px + bytes([1, 1, 1, 3])
    back = IO.decode_hdr(HEADER + b"-Y 1 +X 4\n" + body)
    assert np.all(back == back[0, 0]) and back.shape == (1, 4, 3)


def test_flat_scanlines():
    px = [bytes([128, 0, 0, 129]), bytes([0, 128, 0, 129])]
    back = IO.decode_hdr(HEADER + b"-Y 1 +X 2\n" + b"".join(px))
    assert back[0, 0, 0] > 1 and back[0, 1, 1] > 1


@pytest.mark.parametrize("blob,offset", [
    (b"P6\n", 0),
    (b"#?RADIANCE\nFORMAT=32-bit_rle_xyze\n\n-Y 1 +X 1\n", 11),
    (HEADER + b"+Y 1 +X 1\n", len(HEADER)),
    (HEADER + b"-Y 1 +X 8\n" + bytes([2, 2, 0, 9]), len(HEADER) + 10),
    (HEADER + b"-Y 2 +X 1\n" + bytes(4), len(HEADER) + 14),
])
def test_malformed_hdr_reports_offset(blob, offset):
    with pytest.raises(FormatError) as exc:
        IO.decode_hdr(blob)
    assert exc.value.offset == offset
    assert str(offset) in str(exc.value)


def test_bad_run_rejected():
    line = bytes([2, 2, 0, 8]) + bytes([130 + 10, 1])
    with pytest.raises(FormatError, match="bad run"):
        IO.decode_hdr(HEADER + b"-Y 1 +X 8\n" + line)


@settings(max_examples=50)
@given(arrays(np.float32, (3, 4, 3), elements=st.floats(allow_nan=False, width=32)))
def test_pfm_bit_exact(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    IO.write_pfm(path, img)
    assert IO.read_pfm(path).tobytes() == img.tobytes()


def test_pfm_big_endian_and_gray():
    img = np.arange(6, dtype=np.float32).reshape(2, 3)
    payload = img[::-1].astype(">f4").tobytes()
    back = IO.decode_pfm(b"Pf\n3 2\n1.0\n" + payload)
    assert back.shape == (2, 3, 3)
    np.testing.assert_array_equal(back[..., 1], img)


@pytest.mark.parametrize("blob,match", [
    (b"P7\n1 1\n-1.0\n" + bytes(12), "not a PFM"),
    (b"PF\n1 x\n-1.0\n" + bytes(12), "malformed"),
    (b"PF\n2 2\n-1.0\n" + bytes(12), "truncated"),
    (b"PF\n1", "truncated"),
    (b"PF\n1 1\n0\n" + bytes(12), "invalid"),
])
def test_malformed_pfm(blob, match):
    with pytest.raises(FormatError, match=match):
        IO.decode_pfm(blob)


def test_read_any_dispatch(tmp_path):
    img = np.full((4, 4, 3), 0.5, dtype=np.float32)
    IO.write_hdr_any(tmp_path / "a.pfm", img)
    IO.write_hdr_any(tmp_path / "a.hdr", img)
    np.testing.assert_array_equal(IO.read_hdr_any(tmp_path / "a.pfm"), img)
    np.testing.assert_allclose(IO.read_hdr_any(tmp_path / "a.hdr"), img, rtol=1 / 256)
    with pytest.raises(FormatError):
        IO.read_hdr_any(tmp_path / "a.exr")


def test_ldr_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 6, 3)) / 255.0
    IO.write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(IO.read_ldr(tmp_path / "a.png"), img)


def test_drago_range_and_monotone():
    lum = np.logspace(-2, 3, 50)
    img = np.repeat(lum[None, :, None], 3, axis=2)
    out = IO.drago_tonemap(img)
    assert out.min() >= 0 and out.max() <= 1
    assert np.all(np.diff(out[0, :, 0]) >= 0)
    assert np.all(IO.drago_tonemap(np.zeros((2, 2, 3))) == 0)
    with pytest.raises(ValueError):
        IO.drago_tonemap(img, bias=1.0)


def test_exposure_stack(tmp_path):
    img = np.full((4, 4, 3), 0.5)
    frames, paths = IO.exposure_stack_preview(img, out_dir=tmp_path)
    assert len(frames) == 5 and len(paths) == 5
    means = [f.mean() for f in frames]
    assert means == sorted(means) and means[-1] == 1.0
    with pytest.raises(ValueError):
        IO.exposure_stack_preview(img, exposures=(0.0,))
