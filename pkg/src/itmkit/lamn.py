"""Lightness-adaptive mask and the modulation network that turns it into
per-stage scale (gamma) and bias (beta) maps."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError

DEFAULT_TAU = 0.95
CONFIG_C_TAU = 1.0 - 1e-10


def lightness(ldr):
    """Per-pixel max over RGB. Accepts (H, W, 3) or (N, 3, H, W)."""
    ldr = np.asarray(ldr)
    if ldr.ndim == 3 and ldr.shape[2] == 3:
        return ldr.max(axis=2)
    if ldr.ndim == 4 and ldr.shape[1] == 3:
        return ldr.max(axis=1, keepdims=True)
    raise ShapeError(f"expected (H, W, 3) or (N, 3, H, W) image, got {ldr.shape}", dim="channels")


def compute_mask(ldr, tau=DEFAULT_TAU):
    """M = max(0, lightness - tau) / (1 - tau).

    Returns (H, W) for an HWC image, (N, 1, H, W) for an NCHW batch.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    light = lightness(ldr).astype(np.float64)
    if np.any(light < 0) or np.any(light > 1):
        raise ValueError("LDR values must lie in [0, 1]")
    return np.maximum(0.0, light - tau) / (1.0 - tau)


def he_normal(rng, cout, cin, k, dtype=np.float32):
    std = np.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)


def lamn_param_shapes(width, n_stages):
    """Name -> shape for the gamma and beta chains."""
    shapes = {}
    for chain in ("gamma", "beta"):
        for i in range(1, n_stages + 1):
            cin = 1 if i == 1 else width
            shapes[f"lamn.{chain}.{i}.w"] = (width, cin, 3, 3)
            shapes[f"lamn.{chain}.{i}.b"] = (width,)
    return shapes


def init_lamn_params(width, n_stages, rng, dtype=np.float32):
    """He-normal weights, zero biases."""
    params = {}
    for name, shape in lamn_param_shapes(width, n_stages).items():
        if name.endswith(".w"):
            params[name] = he_normal(rng, *shape[:3], dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def _chain(mask, params, chain, n_stages, stage_shapes):
    out = []
    h = mask
    for i in range(1, n_stages + 1):
        if stage_shapes is not None:
            want = stage_shapes[i - 1]
            cur = h.shape[2:]
            if cur != tuple(want[-2:]):
                factor = cur[0] // want[-2] if want[-2] else 0
                if factor < 2 or cur[0] != want[-2] * factor or cur[1] != want[-1] * factor:
                    raise ShapeError(
                        f"LAMN stage {i}: {chain} input {cur} cannot match HiSN activation {tuple(want)}",
                        dim=f"stage {i}",
                    )
                h = T.avg_pool2d(h, factor)
        h = T.relu(T.conv2d(h, params[f"lamn.{chain}.{i}.w"], params[f"lamn.{chain}.{i}.b"], 1, 1, 1))
        if stage_shapes is not None and h.shape[1:] != tuple(stage_shapes[i - 1][-3:]):
            raise ShapeError(
                f"LAMN stage {i}: {chain} has shape {h.shape[1:]}, HiSN activation is "
                f"{tuple(stage_shapes[i - 1][-3:])}",
                dim=f"stage {i}",
            )
        out.append(h)
    return out


def lamn_forward(mask, params, n_stages, stage_shapes=None):
    """Return ``[(gamma_i, beta_i) for i in 1..n]``.

    ``mask`` is an (N, 1, H, W) Tensor or array. ``stage_shapes`` lists the
    (C, H, W) of the HiSN activations being modulated; a stage at lower
    resolution gets an average-pooled chain input.
    """
    mask = T.as_tensor(mask)
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise ShapeError(f"mask must be (N, 1, H, W), got {mask.shape}", dim="mask")
    gammas = _chain(mask, params, "gamma", n_stages, stage_shapes)
    betas = _chain(mask, params, "beta", n_stages, stage_shapes)
    return list(zip(gammas, betas))


def modulate(x, gamma, beta):
    """x * (1 + gamma) + beta."""
    x, gamma, beta = T.as_tensor(x), T.as_tensor(gamma), T.as_tensor(beta)
    if not (x.shape == gamma.shape == beta.shape):
        raise ShapeError(
            f"modulate: shapes differ x={x.shape} gamma={gamma.shape} beta={beta.shape}", dim="modulation"
        )
    return T.add(T.add(x, T.mul(x, gamma)), beta)


def mask_to_png(mask, path):
    """Write a single mask as 8-bit grayscale PNG."""
    from PIL import Image

    m = np.asarray(mask, dtype=np.float64)
    m = m.reshape(m.shape[-2:])
    Image.fromarray(np.round(np.clip(m, 0, 1) * 255).astype(np.uint8), "L").save(path)
