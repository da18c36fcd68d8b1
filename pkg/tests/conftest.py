"""Shared rasterization helpers used as independent oracles.

These draw shapes directly from their generating equations (pixel-center
inclusion tests) so geometry tests never depend on the package's own
segmentation or generator code.
"""

import numpy as np
import pytest

from fragpredict.imaging import GrayImage


def disk_mask(radius, size, cx=None, cy=None):
    if cx is None:
        cx = (size - 1) / 2.0
    if cy is None:
        cy = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2


def ellipse_mask(a, b, theta, size, cx=None, cy=None):
    if cx is None:
        cx = (size - 1) / 2.0
    if cy is None:
        cy = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def image_from_mask(mask, fg=40, bg=220, noise_sigma=0.0, seed=0, extra_tone=None):
    """Grayscale image with the mask drawn dark on a light background.

    A single `extra_tone` pixel is placed in a corner when the scene would
    otherwise have fewer than 3 distinct tones (trinarization needs 3).
    """
    img = np.full(mask.shape, bg, dtype=np.float64)
    img[mask] = fg
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        img += rng.normal(0, noise_sigma, mask.shape)
    out = np.clip(np.round(img), 0, 255).astype(np.uint8)
    if extra_tone is None and noise_sigma == 0:
        out[0, 0] = (fg + bg) // 2
    elif extra_tone is not None:
        out[0, 0] = extra_tone
    return GrayImage(out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
