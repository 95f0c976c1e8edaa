"""Procedural two-domain image data.

Each sample is a float64 array of shape (channels, height, width) in
[-1, 1] before noise. Domains are unpaired: the X and Y sets are drawn
from independent streams of the same seeded generator.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_dataset", "render_sample"]


def _stripes(spec, rng):
    """Diagonal stripes with a random phase and orientation flip."""
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    phase = rng.integers(0, spec.period)
    flip = rng.integers(0, 2)
    coord = (xx + yy) if flip == 0 else (xx - yy)
    band = ((coord + phase) // (max(1, spec.period // 2))) % 2
    return band.astype(np.float64) * 2.0 - 1.0


def _checker(spec, rng):
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    cell = max(1, spec.period // 2)
    ox = rng.integers(0, cell)
    oy = rng.integers(0, cell)
    board = (((xx + ox) // cell) + ((yy + oy) // cell)) % 2
    return board.astype(np.float64) * 2.0 - 1.0


def _blobs(spec, rng):
    """A few soft Gaussian bumps on a dark field."""
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    img = np.full((spec.height, spec.width), -1.0)
    count = int(rng.integers(2, 5))
    sigma = max(1.0, spec.period / 4.0)
    for _ in range(count):
        cy = rng.uniform(0, spec.height)
        cx = rng.uniform(0, spec.width)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        img = np.maximum(img, 2.0 * np.exp(-d2 / (2.0 * sigma**2)) - 1.0)
    return img


_RENDERERS = {"stripes": _stripes, "checker": _checker, "blobs": _blobs}


def render_sample(spec, rng):
    """Draw one image from the domain. Shape (channels, height, width)."""
    base = _RENDERERS[spec.kind](spec, rng) * spec.contrast
    img = np.broadcast_to(base, (spec.channels, spec.height, spec.width)).copy()
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return img


def make_dataset(spec_x, spec_y, n_x, n_y, seed):
    """Build unpaired training sets for the two domains.

    Returns (xs, ys): arrays of shape (n, C, H, W). The two domains use
    independent child streams of `seed`, so changing n_x never perturbs
    the Y draws.
    """
    if n_x < 1 or n_y < 1:
        raise ValueError("make_dataset: need at least one sample per domain")
    seq = np.random.SeedSequence(seed)
    child_x, child_y = seq.spawn(2)
    rng_x = np.random.Generator(np.random.PCG64(child_x))
    rng_y = np.random.Generator(np.random.PCG64(child_y))
    xs = np.stack([render_sample(spec_x, rng_x) for _ in range(n_x)])
    ys = np.stack([render_sample(spec_y, rng_y) for _ in range(n_y)])
    return xs, ys
