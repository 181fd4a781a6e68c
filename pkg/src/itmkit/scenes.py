"""Procedural HDR scenes for tests, demos and desk-scale training.

No HDR photographs ship with the package, so these stand in for them: a
log-normal textured background with a few compact light sources that are
one to two orders of magnitude brighter than their surroundings.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def synthetic_scene(size=64, seed=0, n_lights=2, peak=(8.0, 40.0), width=None):
    """Return an (size, width, 3) float64 radiance map."""
    rng = np.random.default_rng(seed)
    h, w = size, width or size
    # smooth log-radiance field plus finer texture
    coarse = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 6, mode="wrap")
    fine = gaussian_filter(rng.standard_normal((h, w)), sigma=1.5, mode="wrap")
    coarse /= coarse.std() + 1e-12
    fine /= fine.std() + 1e-12
    log_lum = -1.6 + 0.6 * coarse + 0.25 * fine
    tint = rng.uniform(0.7, 1.3, size=3)
    tint /= tint.mean()
    chroma = 1.0 + 0.15 * gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(h / 8, w / 8, 0))
    img = np.exp(log_lum)[..., None] * tint * np.clip(chroma, 0.5, 1.5)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(n_lights):
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        radius = rng.uniform(0.05, 0.12) * min(h, w)
        strength = rng.uniform(*peak)
        color = rng.uniform(0.8, 1.2, size=3)
        r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius ** 2
        img += strength * np.exp(-r2)[..., None] * color
    return img


def scene_set(count, size=64, seed=0, **kw):
    return [synthetic_scene(size, seed=seed * 1000 + i, **kw) for i in range(count)]


def toy_samples(count=4, size=64, seed=100, saturation=0.06, gamma=2.2):
    """Noise-free training pairs from procedural scenes, each exposed so
    about ``saturation`` of its pixels clip."""
    from .pipeline import exposure_for_saturation, gamma_curve, synthesize_pair
    from .training import TrainingSample

    out = []
    for i in range(count):
        h = synthetic_scene(size, seed=seed + i)
        pair = synthesize_pair(h, exposure_for_saturation(h, saturation), gamma_curve(gamma))
        out.append(TrainingSample.from_pair(pair, {"scene_seed": seed + i}))
    return out
