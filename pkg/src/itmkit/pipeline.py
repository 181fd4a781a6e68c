"""Forward LDR imaging simulator: clip, camera response, noise, 8-bit quantisation, JPEG.

Images are float arrays of shape (H, W, 3). HDR arrays hold non-negative
linear radiance; LDR arrays hold values in [0, 1].
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

log = logging.getLogger(__name__)

CURVE_SAMPLES = 1024
DORF_CURVE_COUNT = 201
DORF_TRAIN_COUNT = 171


def check_hdr(h):
    h = np.asarray(h)
    if h.ndim != 3 or h.shape[2] != 3:
        raise ShapeError(f"HDR image must be (H, W, 3), got {h.shape}", dim="channels")
    if not np.all(np.isfinite(h)):
        raise ValueError("HDR image contains non-finite values")
    if np.any(h < 0):
        raise ValueError("HDR image contains negative values")
    return h


def check_ldr(img, quantized=False):
    img = np.asarray(img)
    if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
        raise ValueError("LDR image values must lie in [0, 1]")
    if quantized and not is_quantized(img):
        raise ValueError("LDR image is not on the 8-bit lattice")
    return img


def is_quantized(img, tol=1e-9):
    scaled = np.asarray(img, dtype=np.float64) * 255.0
    return bool(np.all(np.abs(scaled - np.round(scaled)) <= tol))


# ---------------------------------------------------------------------------
# response curves

@dataclass(frozen=True)
class ResponseCurve:
    """Monotone [0, 1] -> [0, 1] camera response sampled on a uniform grid."""

    name: str
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size < 2:
            raise ValueError(f"curve {self.name!r}: samples must be a 1-D array")
        if np.any(np.diff(s) < 0):
            raise ValueError(f"curve {self.name!r} is not monotone non-decreasing")
        if s[0] != 0.0 or s[-1] != 1.0:
            raise ValueError(f"curve {self.name!r} is not normalised to f(0)=0, f(1)=1")
        object.__setattr__(self, "samples", s)

    @property
    def grid(self):
        return np.linspace(0.0, 1.0, self.samples.size)

    def __call__(self, x):
        return np.interp(x, self.grid, self.samples)

    def inverse(self, y):
        # flat stretches make the inverse set-valued; np.interp picks a point in it
        return np.interp(y, self.samples, self.grid)

    @classmethod
    def from_samples(cls, name, irradiance, brightness, size=CURVE_SAMPLES):
        """Validate, resample to ``size`` uniform points and normalise."""
        irr = np.asarray(irradiance, dtype=np.float64)
        br = np.asarray(brightness, dtype=np.float64)
        if irr.shape != br.shape or irr.ndim != 1 or irr.size < 2:
            raise ValueError(f"curve {name!r}: irradiance/brightness length mismatch")
        tol = 1e-6
        if np.any(irr < -tol) or np.any(irr > 1 + tol) or np.any(br < -tol) or np.any(br > 1 + tol):
            raise ValueError(f"curve {name!r} has samples outside [0, 1]")
        if np.any(np.diff(irr) <= 0):
            raise ValueError(f"curve {name!r}: irradiance samples are not strictly increasing")
        if np.any(np.diff(br) < 0):
            raise ValueError(f"curve {name!r} is not monotone non-decreasing")
        grid = np.linspace(irr[0], irr[-1], size)
        s = np.interp(grid, irr, br)
        lo, hi = s[0], s[-1]
        if hi <= lo:
            raise ValueError(f"curve {name!r} is constant")
        s = (s - lo) / (hi - lo)
        s[0], s[-1] = 0.0, 1.0
        return cls(name, np.maximum.accumulate(s))


def identity_curve():
    return ResponseCurve("identity", np.linspace(0.0, 1.0, CURVE_SAMPLES))


def gamma_curve(gamma):
    x = np.linspace(0.0, 1.0, CURVE_SAMPLES)
    return ResponseCurve(f"gamma{gamma:.4f}", x ** (1.0 / gamma))


def gamma_family(count, lo=1.8, hi=2.6, rng=None):
    """``count`` gamma curves x**(1/g) with g uniform in [lo, hi].

    Without an ``rng`` the exponents are evenly spaced, which keeps
    the family reproducible without a seed.
    """
    if rng is None:
        gammas = np.linspace(lo, hi, count) if count > 1 else np.array([(lo + hi) / 2])
    else:
        gammas = rng.uniform(lo, hi, size=count)
    return [gamma_curve(float(g)) for g in gammas]


def _floats(line, name, lineno):
    try:
        return [float(tok) for tok in line.split()]
    except ValueError:
        raise FormatError(f"curve {name!r}: non-numeric sample on line {lineno}") from None


def parse_dorf(text):
    """Parse DoRF text.

    Accepts the distributed layout (name, ``graph #n``, ``I =``, values,
    ``B =``, values) as well as the bare three-line form (name line,
    irradiance line, brightness line).
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln]
    curves = []
    pos = 0
    while pos < len(lines):
        lineno, name = lines[pos]
        pos += 1
        if pos < len(lines) and lines[pos][1].lower().startswith("graph"):
            pos += 1
        vectors = []
        for label in ("I", "B"):
            if pos >= len(lines):
                raise FormatError(f"curve {name!r}: truncated after line {lineno}")
            ln_no, ln = lines[pos]
            if ln.replace(" ", "").upper() == f"{label}=":
                pos += 1
                if pos >= len(lines):
                    raise FormatError(f"curve {name!r}: missing {label} samples")
                ln_no, ln = lines[pos]
            vectors.append(_floats(ln, name, ln_no))
            pos += 1
        try:
            curves.append(ResponseCurve.from_samples(name, vectors[0], vectors[1]))
        except ValueError as exc:
            raise FormatError(str(exc)) from None
    return curves


def format_dorf(curves, points=CURVE_SAMPLES):
    """Serialise curves in the distributed DoRF layout."""
    out = []
    for i, c in enumerate(curves, 1):
        grid = np.linspace(0.0, 1.0, points)
        out.append(c.name)
        out.append(f"graph #{i}")
        out.append("I =")
        out.append(" ".join(f"{v:.6e}" for v in grid))
        out.append("B =")
        out.append(" ".join(f"{v:.6e}" for v in c(grid)))
    return "\n".join(out) + "\n"


def load_response_curves(source="gamma", count=DORF_TRAIN_COUNT, seed=None):
    """Curves from a DoRF file path, or the parametric gamma family.

    ``source`` is a path or the string ``"gamma"``; ``count`` only applies to
    the gamma family.
    """
    if isinstance(source, str) and source in ("gamma", "parametric"):
        rng = None if seed is None else np.random.default_rng(seed)
        return gamma_family(count, rng=rng)
    path = Path(source)
    return parse_dorf(path.read_text())


def split_curves(curves, n_train=DORF_TRAIN_COUNT):
    """Deterministic (train, test) split keeping file order."""
    return list(curves[:n_train]), list(curves[n_train:])


# ---------------------------------------------------------------------------
# pipeline stages

def clip_dynamic_range(h):
    h = np.asarray(h)
    if np.any(h < 0):
        raise ValueError("clip_dynamic_range: negative radiance")
    return np.minimum(h, 1.0)


def apply_crf(img, curve: ResponseCurve):
    img = np.asarray(img)
    if np.any(img < 0) or np.any(img > 1):
        raise ValueError("apply_crf: input outside [0, 1]")
    return curve(img)


def quantize8(img):
    """floor(v * 255 + 0.5) / 255."""
    return np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5) / 255.0


@dataclass(frozen=True)
class NoiseParams:
    sigma_s: float = 0.0
    sigma_c: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sigma_s <= 0.013:
            raise ValueError(f"sigma_s {self.sigma_s} outside [0, 0.013]")
        if not 0.0 <= self.sigma_c <= 0.005:
            raise ValueError(f"sigma_c {self.sigma_c} outside [0, 0.005]")

    @classmethod
    def sample(cls, rng, s_max=0.013, c_max=0.005):
        return cls(float(rng.uniform(0, s_max)), float(rng.uniform(0, c_max)), int(rng.integers(2**31)))


def add_noise(img, params: NoiseParams):
    """Heteroscedastic Gaussian noise with variance I*sigma_s**2 + sigma_c**2, clamped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if params.sigma_s == 0 and params.sigma_c == 0:
        return img.copy()
    std = np.sqrt(img * params.sigma_s ** 2 + params.sigma_c ** 2)
    rng = np.random.default_rng(params.seed)
    return np.clip(img + std * rng.standard_normal(img.shape), 0.0, 1.0)


def jpeg_round_trip(img, quality, enabled=True):
    """Encode/decode through baseline JPEG. Returns the input unchanged when disabled
    or when no codec is available."""
    if not 85 <= quality <= 100:
        raise ValueError(f"JPEG quality {quality} outside [85, 100]")
    if not enabled:
        return np.asarray(img)
    try:
        from PIL import Image
    except ImportError:
        log.warning("JPEG codec unavailable; skipping JPEG augmentation")
        return np.asarray(img)
    u8 = np.round(np.asarray(img) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, "RGB").save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    dec = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64)
    return dec / 255.0


def sample_exposures(count, lo_log2=-3.0, hi_log2=3.0):
    if count < 2:
        raise ValueError("sample_exposures needs count >= 2")
    return [float(2.0 ** e) for e in np.linspace(lo_log2, hi_log2, count)]


@dataclass
class SynthesizedPair:
    ldr: np.ndarray
    dim: np.ndarray        # C(H t)
    bright: np.ndarray     # H t - C(H t)
    crf_target: np.ndarray  # F(C(H t)) before noise and quantisation

    @property
    def hdr(self):
        return self.dim + self.bright


def synthesize_pair(h, t, curve: ResponseCurve, noise: NoiseParams | None = None, jpeg_quality=None):
    """L = jpeg(Q(noise(F(C(H t))))) together with the decomposed targets."""
    if t <= 0:
        raise ValueError("exposure must be positive")
    ht = check_hdr(h).astype(np.float64) * t
    dim = clip_dynamic_range(ht)
    bright = ht - dim
    i2 = apply_crf(dim, curve)
    noisy = add_noise(i2, noise) if noise is not None else i2
    ldr = quantize8(noisy)
    if jpeg_quality is not None:
        ldr = jpeg_round_trip(ldr, jpeg_quality)
    return SynthesizedPair(ldr=ldr, dim=dim, bright=bright, crf_target=i2)


def naive_expand(ldr):
    """x**2 inverse-response baseline."""
    x = check_ldr(ldr)
    return np.asarray(x, dtype=np.float64) ** 2


def render_exposure(h, t, curve: ResponseCurve):
    """Noise-free Q(F(C(H t))) used for preview stacks."""
    return quantize8(apply_crf(clip_dynamic_range(check_hdr(h) * t), curve))


# ---------------------------------------------------------------------------
# configuration

@dataclass
class PipelineConfig:
    exposures: list = field(default_factory=lambda: sample_exposures(60))
    crf_source: str = "gamma"
    crf_count: int = DORF_TRAIN_COUNT
    sigma_s_max: float = 0.013
    sigma_c_max: float = 0.005
    noise: bool = True
    jpeg: bool = True
    jpeg_quality: tuple = (85, 100)
    seed: int = 0

    def __post_init__(self):
        if not self.exposures or any(t <= 0 for t in self.exposures):
            raise ValueError("exposure values must be positive")
        lo, hi = self.jpeg_quality
        if not (85 <= lo <= hi <= 100):
            raise ValueError(f"JPEG quality range {self.jpeg_quality} not within [85, 100]")
        if not (0 <= self.sigma_s_max <= 0.013 and 0 <= self.sigma_c_max <= 0.005):
            raise ValueError("noise ranges exceed sigma_s <= 0.013, sigma_c <= 0.005")


def image_rng(master_seed, index):
    """Per-image generator derived from (master seed, image index)."""
    return np.random.default_rng([int(master_seed), int(index)])


def exposure_for_saturation(h, fraction=0.05):
    """Exposure that pushes roughly ``fraction`` of pixels above 1 (max channel)."""
    lum = np.max(check_hdr(h), axis=2)
    q = float(np.quantile(lum, 1.0 - fraction))
    return 1.0 / q if q > 0 else 1.0
