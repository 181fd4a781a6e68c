"""Perceptually uniform (PU) encoding and PU-PSNR / PU-SSIM / PU-MS-SSIM."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ItmError, ShapeError

log = logging.getLogger(__name__)

L_MIN = 0.005       # cd/m^2
L_MAX = 1e4
DISPLAY_PEAK = 1000.0
ANCHOR_PERCENTILE = 99.9
PSNR_CAP = 99.0

# joint rod-cone contrast sensitivity parameters (peak, sensitivity drop, transition slope, low slope)
_CSF_SA = (30.162, 4.0627, 1.6596, 0.2712)


def _sensitivity(lum):
    peak, drop, slope, low = _CSF_SA
    return peak * ((drop / lum) ** slope + 1.0) ** (-low)


def _build_pu_table(points=4096):
    """Integrate 1/threshold over log-luminance: each unit step is one JND."""
    logl = np.linspace(np.log10(L_MIN), np.log10(L_MAX), points)
    lum = 10.0 ** logl
    integrand = _sensitivity(lum) * np.log(10.0)   # d(JND)/d(log10 L) = L*ln10 / (L/S)
    jnd = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(logl))])
    return logl, jnd / jnd[-1]


PU_LOG_LUM, PU_VALUES = _build_pu_table()


def pu_curve(lum):
    """Map absolute luminance (cd/m^2) to [0, 1]; clamped to [L_MIN, L_MAX]."""
    lum = np.clip(np.asarray(lum, dtype=np.float64), L_MIN, L_MAX)
    return np.interp(np.log10(lum), PU_LOG_LUM, PU_VALUES)


@dataclass
class PuImage:
    data: np.ndarray
    scale: float
    peak: float = DISPLAY_PEAK


def anchor_scale(anchor, peak=DISPLAY_PEAK, percentile=ANCHOR_PERCENTILE):
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(anchor < 0):
        raise ValueError("anchor image must be non-negative")
    ref = float(np.percentile(anchor, percentile))
    if ref <= 0:
        raise ValueError("anchor image is all zero (or its 99.9th percentile is zero)")
    return peak / ref


def pu_encode(img, anchor, peak=DISPLAY_PEAK):
    """Scale by 1000 / p99.9(anchor) into cd/m^2, then apply the PU curve."""
    img = np.asarray(img, dtype=np.float64)
    if np.any(img < 0):
        raise ValueError("image must be non-negative")
    s = anchor_scale(anchor, peak)
    return PuImage(pu_curve(img * s), s, peak)


def _data(x):
    return x.data if isinstance(x, PuImage) else np.asarray(x, dtype=np.float64)


def psnr(a, b):
    a, b = _data(a), _data(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ {a.shape} vs {b.shape}", dim="shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, win):
    r = len(win) // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def _ssim_maps(x, y, win, k1=0.01, k2=0.03, data_range=1.0):
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return lum * cs, cs


def _channels(a):
    return [a] if a.ndim == 2 else [a[..., c] for c in range(a.shape[-1])]


def _check_pair(a, b, win_size):
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ {a.shape} vs {b.shape}", dim="shape")
    if min(a.shape[:2]) < win_size:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {win_size}x{win_size} window", dim="spatial")


def ssim(a, b, win_size=11, sigma=1.5):
    """Mean SSIM over channels; Gaussian window, K1=0.01, K2=0.03, range 1."""
    a, b = _data(a), _data(b)
    _check_pair(a, b, win_size)
    win = gaussian_window(win_size, sigma)
    return float(np.mean([_ssim_maps(x, y, win)[0].mean() for x, y in zip(_channels(a), _channels(b))]))


MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _downsample(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_scales(min_dim, win_size=11, max_scales=5):
    scales = 0
    while scales < max_scales and min_dim // (2 ** scales) >= win_size:
        scales += 1
    return scales


def ms_ssim(a, b, win_size=11, sigma=1.5):
    """Multi-scale SSIM with the standard five weights.

    Images below 176 px get fewer scales with the leading weights
    renormalised; negative contrast terms are clamped at zero.
    """
    a, b = _data(a), _data(b)
    _check_pair(a, b, win_size)
    scales = ms_ssim_scales(min(a.shape[:2]), win_size)
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    win = gaussian_window(win_size, sigma)
    per_channel = []
    for x, y in zip(_channels(a), _channels(b)):
        vals = []
        for s in range(scales):
            ss, cs = _ssim_maps(x, y, win)
            vals.append(max(ss.mean() if s == scales - 1 else cs.mean(), 0.0))
            if s < scales - 1:
                x, y = _downsample(x), _downsample(y)
        per_channel.append(float(np.prod(np.power(vals, weights))))
    return float(np.mean(per_channel))


# ---------------------------------------------------------------------------
# directory evaluation

@dataclass
class MetricRow:
    filename: str
    pu_psnr_db: float
    pu_ssim: float
    pu_ms_ssim: float


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    mean: MetricRow | None = None
    missing: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def flagged(self):
        return bool(self.missing)


def score_pair(pred, ref):
    """(PU-PSNR, PU-SSIM, PU-MS-SSIM) with both images anchored to ``ref``."""
    pa, pb = pu_encode(pred, ref), pu_encode(ref, ref)
    return psnr(pa, pb), ssim(pa, pb), ms_ssim(pa, pb)


class EvaluationError(ItmError):
    pass


def evaluate(pred_dir, ref_dir, out_csv=None, config=None):
    """Score every file present in both directories; write CSV + JSON sidecar."""
    from .hdrio import HDR_SUFFIXES, read_hdr_any

    def listing(d):
        return {p.name: p for p in sorted(Path(d).iterdir()) if p.suffix.lower() in HDR_SUFFIXES}

    preds, refs = listing(pred_dir), listing(ref_dir)
    common = sorted(set(preds) & set(refs))
    missing = sorted(set(preds) ^ set(refs))
    for name in missing:
        log.warning("no counterpart for %s", name)
    if not common:
        raise EvaluationError(f"no matching HDR files between {pred_dir} and {ref_dir}; missing: {missing}")
    report = MetricReport(missing=missing, config=dict(config or {}))
    for name in common:
        p, r = read_hdr_any(preds[name]), read_hdr_any(refs[name])
        report.rows.append(MetricRow(name, *score_pair(p, r)))
    report.mean = MetricRow(
        "mean",
        float(np.mean([r.pu_psnr_db for r in report.rows])),
        float(np.mean([r.pu_ssim for r in report.rows])),
        float(np.mean([r.pu_ms_ssim for r in report.rows])),
    )
    if out_csv is not None:
        write_report(report, out_csv)
    return report


def write_report(report: MetricReport, out_csv):
    out_csv = Path(out_csv)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "pu_psnr_db", "pu_ssim", "pu_ms_ssim"])
        for r in report.rows + [report.mean]:
            w.writerow([r.filename, f"{r.pu_psnr_db:.6f}", f"{r.pu_ssim:.6f}", f"{r.pu_ms_ssim:.6f}"])
    sidecar = {
        "config": report.config,
        "missing": report.missing,
        "flagged": report.flagged,
        "pu": {"l_min": L_MIN, "l_max": L_MAX, "display_peak": DISPLAY_PEAK,
               "anchor_percentile": ANCHOR_PERCENTILE},
        "mean": asdict(report.mean),
    }
    out_csv.with_suffix(out_csv.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
