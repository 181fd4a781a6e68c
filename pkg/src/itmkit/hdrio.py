"""HDR/LDR file codecs, Drago tone mapping and exposure-stack previews."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError
from .pipeline import check_hdr, identity_curve, render_exposure

# ---------------------------------------------------------------------------
# Radiance RGBE


def rgbe_encode(rgb):
    """float (..., 3) -> uint8 (..., 4) shared-exponent pixels."""
    rgb = np.asarray(rgb, dtype=np.float64)
    v = rgb.max(axis=-1)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    nz = v > 1e-32
    mant, exp = np.frexp(v[nz])
    scale = mant * 256.0 / v[nz]
    out[nz, :3] = np.floor(rgb[nz] * scale[:, None]).astype(np.uint8)
    out[nz, 3] = (exp + 128).astype(np.uint8)
    return out


def rgbe_decode(rgbe):
    """uint8 (..., 4) -> float32 (..., 3); mantissas are centred with +0.5."""
    rgbe = np.asarray(rgbe)
    e = rgbe[..., 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    rgb = (rgbe[..., :3].astype(np.float64) + 0.5) * f[..., None]
    return rgb.astype(np.float32)


def _rle_encode_channel(data):
    """Radiance run-length encoding of one component of one scanline."""
    out = bytearray()
    n = len(data)
    i = 0
    while i < n:
        # find next run of >= 3
        j = i
        run_start, run_len = n, 0
        while j < n:
            k = j
            while k + 1 < n and data[k + 1] == data[j] and k + 1 - j < 126:
                k += 1
            if k - j + 1 >= 3:
                run_start, run_len = j, k - j + 1
                break
            j = k + 1
        # literal bytes before the run
        while i < run_start:
            cnt = min(128, run_start - i)
            out.append(cnt)
            out.extend(data[i:i + cnt])
            i += cnt
        if run_len:
            out.append(128 + run_len)
            out.append(data[run_start])
            i = run_start + run_len
    return bytes(out)


def write_hdr(path, img):
    """Write a Radiance .hdr with RLE scanlines (flat scanlines when width is outside 8..32767)."""
    img = check_hdr(img)
    h, w = img.shape[:2]
    rgbe = rgbe_encode(img)
    parts = [b"#?RADIANCE\n", b"FORMAT=32-bit_rle_rgbe\n", b"\n", f"-Y {h} +X {w}\n".encode()]
    rle = 8 <= w <= 32767
    for y in range(h):
        row = rgbe[y]
        if not rle:
            parts.append(row.tobytes())
            continue
        parts.append(bytes((2, 2, w >> 8, w & 0xFF)))
        for c in range(4):
            parts.append(_rle_encode_channel(row[:, c].tobytes()))
    Path(path).write_bytes(b"".join(parts))


_RES = re.compile(rb"-Y (\d+) \+X (\d+)")


def read_hdr(path):
    """Read a Radiance .hdr (flat, old-style RLE or new-style RLE scanlines)."""
    data = Path(path).read_bytes()
    return decode_hdr(data)


def decode_hdr(data):
    pos = 0

    def readline():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("unterminated header line", offset=pos)
        line = data[pos:end]
        start, pos = pos, end + 1
        return line, start

    first, _ = readline()
    if not first.startswith(b"#?"):
        raise FormatError("missing '#?' signature", offset=0)
    fmt_ok = True
    while True:
        line, start = readline()
        if line == b"":
            break
        if line.startswith(b"FORMAT="):
            fmt_ok = line == b"FORMAT=32-bit_rle_rgbe"
            if not fmt_ok:
                raise FormatError(f"unsupported format {line.decode(errors='replace')!r}", offset=start)
    res, start = readline()
    m = _RES.fullmatch(res.strip())
    if not m:
        raise FormatError(f"unsupported resolution string {res[:40]!r}", offset=start)
    h, w = int(m.group(1)), int(m.group(2))
    if h < 1 or w < 1:
        raise FormatError("empty image", offset=start)

    out = np.zeros((h, w, 4), dtype=np.uint8)
    buf = memoryview(data)
    n = len(data)
    for y in range(h):
        if pos + 4 > n:
            raise FormatError(f"scanline {y} truncated", offset=pos)
        b0, b1, b2, b3 = data[pos:pos + 4]
        if b0 == 2 and b1 == 2 and not (b2 & 0x80) and 8 <= w <= 32767:
            if (b2 << 8 | b3) != w:
                raise FormatError(f"scanline {y} width {(b2 << 8) | b3} != {w}", offset=pos)
            pos += 4
            for c in range(4):
                x = 0
                while x < w:
                    if pos >= n:
                        raise FormatError(f"scanline {y} truncated", offset=pos)
                    cnt = data[pos]
                    pos += 1
                    if cnt > 128:
                        cnt -= 128
                        if x + cnt > w or pos >= n:
                            raise FormatError(f"bad run in scanline {y}", offset=pos - 1)
                        out[y, x:x + cnt, c] = data[pos]
                        pos += 1
                    else:
                        if cnt == 0 or x + cnt > w or pos + cnt > n:
                            raise FormatError(f"bad literal in scanline {y}", offset=pos - 1)
                        out[y, x:x + cnt, c] = np.frombuffer(buf[pos:pos + cnt], dtype=np.uint8)
                        pos += cnt
                    x += cnt
        else:
            # flat pixels, possibly with old-style (1,1,1,count) repeats
            x, shift = 0, 0
            while x < w:
                if pos + 4 > n:
                    raise FormatError(f"scanline {y} truncated", offset=pos)
                px = data[pos:pos + 4]
                if px[0] == 1 and px[1] == 1 and px[2] == 1:
                    if x == 0:
                        raise FormatError(f"repeat with no previous pixel in scanline {y}", offset=pos)
                    cnt = px[3] << shift
                    if x + cnt > w:
                        raise FormatError(f"repeat overruns scanline {y}", offset=pos)
                    out[y, x:x + cnt] = out[y, x - 1]
                    x += cnt
                    shift += 8
                else:
                    out[y, x] = np.frombuffer(px, dtype=np.uint8)
                    x += 1
                    shift = 0
                pos += 4
    return rgbe_decode(out)


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, img):
    """Little-endian PFM (negative scale), rows stored bottom-to-top."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        header = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    else:
        raise FormatError(f"PFM needs (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    payload = np.ascontiguousarray(img[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + f"\n{w} {h}\n-1.0\n".encode() + payload)


def read_pfm(path):
    return decode_pfm(Path(path).read_bytes())


def decode_pfm(data):
    pos = 0
    tokens = []
    # three whitespace-separated header fields after the magic; a single whitespace byte ends the header
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PFM header", offset=pos)
        tokens.append((data[start:pos], start))
    pos += 1
    magic, off = tokens[0]
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise FormatError(f"not a PFM file (magic {magic[:8]!r})", offset=off)
    try:
        w, h = int(tokens[1][0]), int(tokens[2][0])
        scale = float(tokens[3][0])
    except ValueError:
        raise FormatError("malformed PFM size/scale line", offset=tokens[1][1]) from None
    if w < 1 or h < 1 or scale == 0:
        raise FormatError("invalid PFM dimensions or scale", offset=tokens[1][1])
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    need = pos + 4 * count
    if len(data) < need:
        raise FormatError(f"PFM payload truncated: need {4 * count} bytes", offset=len(data))
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.float32)
    arr = arr.reshape(h, w, channels)[::-1]
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.ascontiguousarray(arr)


def read_hdr_any(path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix in (".hdr", ".pic", ".rgbe"):
        return read_hdr(path)
    raise FormatError(f"unsupported HDR extension {suffix!r}")


def write_hdr_any(path, img):
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_hdr(path, img)


HDR_SUFFIXES = (".hdr", ".pfm", ".pic", ".rgbe")

# ---------------------------------------------------------------------------
# 8-bit images


def write_png(path, img):
    from PIL import Image

    img = np.asarray(img, dtype=np.float64)
    u8 = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(u8, "RGB" if u8.ndim == 3 else "L").save(path)


def write_jpeg(path, img, quality):
    from PIL import Image

    u8 = np.round(np.clip(np.asarray(img), 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(u8, "RGB").save(path, format="JPEG", quality=int(quality), subsampling=0)


def read_ldr(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# tone mapping and previews

LUMA = np.array([0.2126, 0.7152, 0.0722])


def drago_tonemap(img, bias=0.85, gamma=2.2, exposure=1.0):
    """Drago adaptive logarithmic mapping of luminance; colour ratios preserved.

    The world luminance is normalised by its log-average, so the brightest
    pixel maps to display value 1 before the final gamma encoding.
    """
    if not 0.0 < bias < 1.0:
        raise ValueError("bias must lie in (0, 1)")
    img = check_hdr(img).astype(np.float64)
    lum = img @ LUMA
    if not np.any(lum > 0):
        return np.zeros_like(img)
    lwa = np.exp(np.mean(np.log(lum[lum > 0] + 1e-9)))
    lw = lum * exposure / lwa
    lmax = lw.max()
    biased = (lw / lmax) ** (np.log(bias) / np.log(0.5))
    ld = np.log1p(lw) / (np.log10(1.0 + lmax) * np.log(2.0 + 8.0 * biased))
    ratio = np.divide(ld, lum, out=np.zeros_like(ld), where=lum > 0)
    out = np.clip(img * ratio[..., None], 0.0, 1.0)
    if gamma:
        out = out ** (1.0 / gamma)
    return out


PREVIEW_EXPOSURES = (0.01, 0.1, 1.0, 4.0, 8.0)


def exposure_stack_preview(img, exposures=PREVIEW_EXPOSURES, curve=None, out_dir=None, prefix="exposure"):
    """Render Q(F(C(H t))) for each exposure; writes PNGs when ``out_dir`` is set."""
    curve = curve or identity_curve()
    if any(t <= 0 for t in exposures):
        raise ValueError("exposures must be positive")
    frames = [render_exposure(img, t, curve) for t in exposures]
    paths = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t, f in zip(exposures, frames):
            p = out / f"{prefix}_t{t:g}.png"
            write_png(p, f)
            paths.append(p)
    return frames, paths
