"""sRGB to CIE Lab (D65)."""
from __future__ import annotations

import numpy as np

# linear sRGB -> XYZ, D65
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)

_DELTA = 6.0 / 29.0


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _xyz(r, g, b):
    m = SRGB_TO_XYZ
    # written out elementwise so white maps to exactly the white point
    x = m[0, 0] * r + m[0, 1] * g + m[0, 2] * b
    y = m[1, 0] * r + m[1, 1] * g + m[1, 2] * b
    z = m[2, 0] * r + m[2, 1] * g + m[2, 2] * b
    return x, y, z


WHITE = _xyz(1.0, 1.0, 1.0)


def _f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def rgb_to_lab(rgb) -> np.ndarray:
    """Convert sRGB values in [0, 1] with shape ``(..., 3)`` to Lab, same shape."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"last axis must hold 3 channels, got shape {rgb.shape}")
    lin = srgb_to_linear(rgb)
    x, y, z = _xyz(lin[..., 0], lin[..., 1], lin[..., 2])
    fx, fy, fz = _f(x / WHITE[0]), _f(y / WHITE[1]), _f(z / WHITE[2])
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)
