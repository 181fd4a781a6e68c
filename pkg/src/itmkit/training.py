"""Loss, optimiser schedule, batching and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, GradientError, ShapeError
from .hisn import ConfigAPrediction, HisnConfig, build_network, hisn_forward, save_checkpoint
from .lamn import CONFIG_C_TAU, DEFAULT_TAU, compute_mask
from .tensor import AdamState, Tensor, adam_step

log = logging.getLogger(__name__)

MASK_VARIANTS = ("default", "configC", "configD", "configE")


@dataclass
class TrainConfig:
    lam: float = 1.0
    mu: float = 5000.0
    batch_size: int = 16
    max_iters: int = 20000
    lr: float = 1e-4
    decay: float = 0.9
    decay_interval: int = 5000
    crop_size: int = 256
    seed: int = 0
    mask_variant: str = "default"
    tau: float = DEFAULT_TAU
    intermediate_supervision: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lam <= 0 or self.mu <= 0 or self.lr <= 0:
            raise ConfigError("lam, mu and lr must be positive")
        if self.crop_size < 16:
            raise ConfigError(f"crop_size must be >= 16, got {self.crop_size}")
        if self.batch_size < 1 or self.max_iters < 1 or self.decay_interval < 1:
            raise ConfigError("batch_size, max_iters and decay_interval must be >= 1")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if self.mask_variant not in MASK_VARIANTS:
            raise ConfigError(f"unknown mask variant {self.mask_variant!r}")

    @classmethod
    def toy(cls, **kw):
        """Desk-scale preset: 64x64 crops, single-sample batches, 2000 iterations.

        The learning rate and schedule are the full-scale ones; faster rates
        let the ReLU bright-part head die on the zero-target majority.
        """
        base = dict(batch_size=1, max_iters=2000, crop_size=64)
        base.update(kw)
        return cls(**base)


def lr_at(cfg: TrainConfig, iteration):
    """lr0 * decay ** floor(iteration / interval); ``iteration`` counts from 0."""
    return cfg.lr * cfg.decay ** (iteration // cfg.decay_interval)


# ---------------------------------------------------------------------------
# samples and batches

@dataclass
class TrainingSample:
    ldr: np.ndarray          # (H, W, 3) in [0, 1]
    dim: np.ndarray          # C(H t)
    bright: np.ndarray       # H t - C(H t)
    crf_target: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.ldr.shape == self.dim.shape == self.bright.shape):
            raise ShapeError("sample arrays must share one shape", dim="sample")
        if np.any(self.bright < 0):
            raise ValueError("bright target must be non-negative")
        if np.any(self.bright[self.dim < 1] != 0):
            raise ValueError("bright target must vanish wherever the dim target is below 1")

    @classmethod
    def from_pair(cls, pair, provenance=None):
        return cls(pair.ldr, pair.dim, pair.bright, pair.crf_target, dict(provenance or {}))


@dataclass
class Batch:
    ldr: np.ndarray    # (N, 3, H, W)
    dim: np.ndarray
    bright: np.ndarray
    crf_target: np.ndarray
    mask: np.ndarray   # (N, 1, H, W)

    @property
    def hdr(self):
        return self.dim + self.bright


def _nchw(a, dtype):
    return np.ascontiguousarray(np.transpose(a, (2, 0, 1))[None], dtype=dtype)


def apply_mask_variant(mask, variant, ldr=None):
    """Override a mask for the C/D/E ablations.

    configC recomputes from ``ldr`` with tau = 1 - 1e-10.
    """
    mask = np.asarray(mask)
    if variant == "default":
        return mask
    if variant == "configD":
        return np.zeros_like(mask)
    if variant == "configE":
        return np.ones_like(mask)
    if variant == "configC":
        if ldr is None:
            raise ValueError("configC needs the LDR image to recompute the mask")
        return compute_mask(ldr, CONFIG_C_TAU).reshape(mask.shape).astype(mask.dtype)
    raise ConfigError(f"unknown mask variant {variant!r}")


def mask_for(ldr_nchw, cfg: TrainConfig):
    m = compute_mask(ldr_nchw, cfg.tau)
    return apply_mask_variant(m, cfg.mask_variant, ldr_nchw)


def make_batch(samples, cfg: TrainConfig, rng=None, crop=None, dtype=np.float32):
    """Stack samples, cropping each to ``crop`` (random offsets if ``rng`` given)."""
    crop = crop or cfg.crop_size
    parts = {k: [] for k in ("ldr", "dim", "bright", "crf_target")}
    for s in samples:
        h, w = s.ldr.shape[:2]
        if h < crop or w < crop:
            raise ShapeError(f"sample {h}x{w} smaller than crop {crop}", dim="crop")
        if rng is not None:
            y = int(rng.integers(0, h - crop + 1))
            x = int(rng.integers(0, w - crop + 1))
        else:
            y, x = (h - crop) // 2, (w - crop) // 2
        sl = (slice(y, y + crop), slice(x, x + crop))
        parts["ldr"].append(_nchw(s.ldr[sl], dtype))
        parts["dim"].append(_nchw(s.dim[sl], dtype))
        parts["bright"].append(_nchw(s.bright[sl], dtype))
        ct = s.crf_target if s.crf_target is not None else s.dim
        parts["crf_target"].append(_nchw(ct[sl], dtype))
    arrays = {k: np.concatenate(v) for k, v in parts.items()}
    # the mask is defined on the float64 image so its zero set is exact
    mask = mask_for(arrays["ldr"].astype(np.float64), cfg).astype(dtype)
    return Batch(mask=mask, **arrays)


class SampleOrder:
    """Epoch-wise shuffled sample indices; a pure function of the seed."""

    def __init__(self, count, rng):
        self.count = count
        self.rng = rng
        self._queue = []

    def take(self, k):
        out = []
        while len(out) < k:
            if not self._queue:
                self._queue = list(self.rng.permutation(self.count))
            out.append(int(self._queue.pop(0)))
        return out


# ---------------------------------------------------------------------------
# loss

def log_map(h, mu=5000.0):
    """log(1 + mu h) / log(1 + mu) for arrays or Tensors."""
    if isinstance(h, Tensor):
        return T.log_map(h, mu)
    h = np.asarray(h, dtype=np.float64)
    if mu <= 0:
        raise ValueError("mu must be positive")
    if np.any(h < 0):
        raise ValueError("log_map input must be non-negative")
    return np.log1p(mu * h) / math.log1p(mu)


@dataclass
class LossTerms:
    total: Tensor
    term1: float
    term2: float
    extra: dict = field(default_factory=dict)


def _check_finite(value, label):
    if not math.isfinite(value):
        raise GradientError(f"loss term {label} is not finite")


def loss(pred, batch: Batch, lam=1.0, mu=5000.0, intermediate_supervision=True):
    """||H1 - C(Ht)|| + lam * ||T(H2) - T(Ht - C(Ht))||, norms as RMS.

    For the configA prediction the three heads are supervised toward
    F(C(Ht)), C(Ht) and Ht; term1 then holds the two intermediate terms.
    """
    dt = pred.h.dtype
    if isinstance(pred, ConfigAPrediction):
        t3 = T.rms(T.log_map(pred.h3p, mu) - Tensor(log_map(batch.hdr, mu).astype(dt)))
        _check_finite(t3.item(), "h3'")
        if intermediate_supervision:
            a = T.rms(pred.h1p - Tensor(batch.crf_target.astype(dt)))
            b = T.rms(pred.h2p - Tensor(batch.dim.astype(dt)))
            _check_finite(a.item(), "h1'")
            _check_finite(b.item(), "h2'")
            first = a + b
            total = first + t3 * lam
            return LossTerms(total, first.item(), t3.item(), {"h1p": a.item(), "h2p": b.item()})
        return LossTerms(t3 * lam, 0.0, t3.item())

    if pred.h1.shape != batch.dim.shape:
        raise ShapeError(f"prediction {pred.h1.shape} vs target {batch.dim.shape}", dim="loss")
    t1 = T.rms(pred.h1 - Tensor(batch.dim.astype(dt)))
    t2 = T.rms(T.log_map(pred.h2, mu) - Tensor(log_map(batch.bright, mu).astype(dt)))
    _check_finite(t1.item(), "term1 (dim part)")
    _check_finite(t2.item(), "term2 (bright part)")
    return LossTerms(t1 + t2 * lam, t1.item(), t2.item())


def forward_loss(params, batch: Batch, cfg: TrainConfig):
    pred = hisn_forward(Tensor(batch.ldr), Tensor(batch.mask), params)
    return pred, loss(pred, batch, cfg.lam, cfg.mu, cfg.intermediate_supervision)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: object
    state: AdamState
    log: list
    diverged: bool = False

    def loss_at(self, iteration):
        return self.log[iteration - 1]["total"]


LOG_FIELDS = ("iteration", "lr", "term1", "term2", "total")


def write_loss_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["iteration"], repr(r["lr"]), repr(r["term1"]), repr(r["term2"]), repr(r["total"])])


def train(dataset, net_cfg: HisnConfig, cfg: TrainConfig, out_dir=None, params=None, progress=None,
          config_echo=None):
    """ADAM on the loss above. Returns a :class:`TrainResult`.

    When ``out_dir`` is given, ``checkpoint.bin`` and ``loss.csv`` are written
    there. A non-finite loss stops training, keeps the last good checkpoint and
    raises :class:`GradientError`.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("training dataset is empty")
    if params is None:
        params = build_network(net_cfg)
    rng = np.random.default_rng(cfg.seed)
    order = SampleOrder(len(samples), rng)
    state = AdamState()
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    echo = {"train": asdict(cfg), "network": asdict(net_cfg)} if config_echo is None else config_echo

    for it in range(cfg.max_iters):
        lr = lr_at(cfg, it)
        idx = order.take(cfg.batch_size)
        batch = make_batch([samples[i] for i in idx], cfg, rng=rng)
        params.zero_grad()
        try:
            _, terms = forward_loss(params, batch, cfg)
            terms.total.backward()
            adam_step(params.tensors, params.grads(), state, lr)
        except GradientError:
            # adam_step validates before writing, so params still hold the last good state
            if out is not None:
                save_checkpoint(out / "checkpoint.bin", params, state, it, extra={"diverged": True, **echo})
                write_loss_log(rows, out / "loss.csv")
            raise
        rows.append({"iteration": it + 1, "lr": lr, "term1": terms.term1, "term2": terms.term2,
                     "total": terms.total.item()})
        if progress is not None:
            progress(rows[-1])
        if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.bin", params, state, it + 1, extra=echo)
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", params, state, cfg.max_iters, extra=echo)
        write_loss_log(rows, out / "loss.csv")
        (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return TrainResult(params, state, rows)


def evaluate_loss(params, samples, cfg: TrainConfig, crop=None):
    """Mean loss over ``samples`` with centred crops, no parameter update."""
    vals = []
    for s in samples:
        batch = make_batch([s], cfg, crop=crop or min(s.ldr.shape[:2]))
        _, terms = forward_loss(params, batch, cfg)
        vals.append(terms.total.item())
    return float(np.mean(vals))


def predict(params, ldr, tau=DEFAULT_TAU, mask_variant="default", dtype=np.float32):
    """Run inference on one (H, W, 3) LDR image; returns HWC arrays (H, H1, H2, mask)."""
    x = _nchw(np.asarray(ldr), dtype)
    m = apply_mask_variant(compute_mask(x.astype(np.float64), tau), mask_variant, x.astype(np.float64))
    pred = hisn_forward(Tensor(x), Tensor(m.astype(dtype)), params)
    hwc = lambda t: np.transpose(t.data[0], (1, 2, 0)).astype(np.float64)  # noqa: E731
    if isinstance(pred, ConfigAPrediction):
        return hwc(pred.h), hwc(pred.h2p), np.zeros_like(hwc(pred.h)), m[0, 0]
    return hwc(pred.h), hwc(pred.h1), hwc(pred.h2), m[0, 0]
