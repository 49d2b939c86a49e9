"""Procedural test images and synthetic judgment fixtures.

The images mimic natural-image statistics closely enough for desk-scale
experiments: a 1/f colour texture overlaid with hard-edged shapes.
"""

from __future__ import annotations

import numpy as np


def _pink_noise(rng, h: int, w: int, beta: float = 2.0) -> np.ndarray:
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = 1.0
    spectrum = (rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))) / f ** (beta / 2)
    spectrum[0, 0] = 0.0
    field = np.real(np.fft.ifft2(spectrum))
    return field / (field.std() + 1e-12)


def make_test_image(seed: int, size: int = 64, shapes: int = 6) -> np.ndarray:
    """A deterministic, colourful ``(size, size, 3)`` image in [0, 1]."""
    rng = np.random.default_rng([20241, seed])
    h = w = size
    base = rng.uniform(0.25, 0.75, size=3)
    mix = rng.normal(0, 1, size=(3, 3))
    tex = np.stack([_pink_noise(rng, h, w) for _ in range(3)], axis=-1) @ mix.T
    img = base + 0.08 * tex
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(shapes):
        color = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.08, 0.25) * size
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < 0.6 * r)
        alpha = rng.uniform(0.6, 1.0)
        img[mask] = (1 - alpha) * img[mask] + alpha * color
    return np.clip(img, 0.0, 1.0)


def separable_triplets(n: int = 1000, informative: int = 2, seed: int = 0, margin=(2000.0, 5000.0), noise=3000.0):
    """Synthetic 2AFC features where one component decides every judgment.

    Returns ``(logp_y1, logp_y0, h)`` with shapes ``(n, 4)``, ``(n, 4)``, ``(n,)``.
    The informative component's log-prob difference agrees in sign with
    ``h - 0.5`` by a large margin; the others are sign-independent noise.
    """
    rng = np.random.default_rng([7, seed])
    h = (rng.random(n) < 0.5).astype(np.float64)
    sign = np.where(h > 0.5, 1.0, -1.0)
    delta = rng.normal(0.0, noise, size=(n, 4))
    delta[:, informative] = sign * rng.uniform(*margin, size=n)
    base = rng.normal(-5e4, 1e3, size=(n, 4))
    return base + delta, base, h
