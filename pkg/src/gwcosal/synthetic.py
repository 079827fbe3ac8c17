"""Synthetic co-saliency groups.

Each group shares one object (same shape and colour, same place, optionally
jittered per image). Every image also carries distractor objects drawn from
the same shape/colour distribution at independent random places. The ground
truth marks only the shared object, so a single image on its own does not
reveal which object is the salient one.

Shapes are compact polyominoes on a coarse grid of ``cell``-pixel squares.
With ``cell`` equal to the network stride, a stride-``cell`` deconvolution can
represent the masks exactly once its kernel has sharpened.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation

SHAPES = {
    "square4": np.ones((4, 4), dtype=bool),
    "rect4x5": np.ones((4, 5), dtype=bool),
    "rect4x6": np.ones((4, 6), dtype=bool),
    "square5": np.ones((5, 5), dtype=bool),
    "bar3x6": np.ones((3, 6), dtype=bool),
    "cross": np.array([[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]], dtype=bool),
}


@dataclass
class SyntheticGroup:
    images: np.ndarray  # (K, 3, h, w) in [0, 1]
    masks: np.ndarray  # (K, 1, h, w) binary common-object masks
    distractors: np.ndarray  # (K, 1, h, w) binary distractor masks


def _colour(rng) -> np.ndarray:
    c = rng.uniform(0.0, 1.0, size=3)
    c[rng.integers(3)] = rng.uniform(0.8, 1.0)
    return c


def _pick_shape(rng) -> np.ndarray:
    shape = list(SHAPES.values())[rng.integers(len(SHAPES))]
    return np.rot90(shape, rng.integers(4))


def _stamp(grid_shape, shape, y, x):
    m = np.zeros(grid_shape, dtype=bool)
    m[y : y + shape.shape[0], x : x + shape.shape[1]] = shape
    return m


def make_group(
    rng: np.random.Generator,
    k: int = 5,
    size: tuple = (64, 128),
    cell: int = 8,
    n_distractors: tuple = (1, 1),
    jitter: int = 0,
) -> SyntheticGroup:
    h, w = size
    if h % cell or w % cell:
        raise ValueError(f"image size {size} is not a multiple of the cell size {cell}")
    gh, gw = h // cell, w // cell
    common_shape = _pick_shape(rng)
    common_colour = _colour(rng)
    sh, sw = common_shape.shape
    y0 = rng.integers(jitter, gh - sh - jitter + 1)
    x0 = rng.integers(jitter, gw - sw - jitter + 1)
    up = np.ones((cell, cell), dtype=bool)

    images = np.empty((k, 3, h, w))
    masks = np.zeros((k, 1, h, w))
    distractors = np.zeros((k, 1, h, w))
    for i in range(k):
        y = y0 + rng.integers(-jitter, jitter + 1)
        x = x0 + rng.integers(-jitter, jitter + 1)
        common = _stamp((gh, gw), common_shape, y, x)
        taken = binary_dilation(common)
        distract = np.zeros((gh, gw), dtype=bool)
        coarse_colour = np.zeros((3, gh, gw))
        n_d = rng.integers(n_distractors[0], n_distractors[1] + 1)
        placed = 0
        for _ in range(100):
            if placed == n_d:
                break
            shape = _pick_shape(rng)
            dy = rng.integers(0, gh - shape.shape[0] + 1)
            dx = rng.integers(0, gw - shape.shape[1] + 1)
            m = _stamp((gh, gw), shape, dy, dx)
            if (m & taken).any():
                continue
            coarse_colour[:, m] = _colour(rng)[:, None]
            distract |= m
            taken |= binary_dilation(m)
            placed += 1
        coarse_colour[:, common] = common_colour[:, None]

        bg = rng.uniform(0.15, 0.45, size=3)
        img = np.broadcast_to(bg[:, None, None], (3, h, w)).copy()
        fg = np.kron(common | distract, up)
        img[:, fg] = np.kron(coarse_colour, up[None])[:, fg]
        img += rng.normal(0.0, 0.03, size=(3, h, w))
        images[i] = np.clip(img, 0.0, 1.0)
        masks[i, 0] = np.kron(common, up)
        distractors[i, 0] = np.kron(distract, up)
    return SyntheticGroup(images, masks, distractors)


def make_groups(n: int, seed: int, **kwargs) -> list[SyntheticGroup]:
    rng = np.random.default_rng(seed)
    return [make_group(rng, **kwargs) for _ in range(n)]
