"""Image descriptors and group formation.

Training groups pair every image with its K-1 nearest neighbours under a
Gist + Lab-histogram descriptor. Evaluation groups are random K-subsets drawn
until every image of a declared group has been covered.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve

from .color import rgb_to_lab

GABOR_WAVELENGTHS = (4.0, 8.0, 16.0)
# filter order within a scale; 90 and 135 are exact np.rot90 copies of 0 and 45
GABOR_ORIENTATIONS = (0, 45, 90, 135)
GABOR_SIGMA_RATIO = 0.56
GIST_GRID = 4
HIST_BINS = 16
LAB_RANGES = ((0.0, 100.0), (-110.0, 110.0), (-110.0, 110.0))


@lru_cache(maxsize=None)
def gabor_bank() -> tuple:
    """Complex Gabor kernels ``[scale][orientation]``, zero-mean, unit energy."""
    bank = []
    for lam in GABOR_WAVELENGTHS:
        sigma = GABOR_SIGMA_RATIO * lam
        half = int(np.ceil(3 * sigma))
        yy, xx = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
        envelope = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
        base = []
        for theta in (0.0, np.pi / 4):
            phase = 2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / lam
            even = envelope * np.cos(phase)
            even -= even.mean()  # no response to flat regions
            odd = envelope * np.sin(phase)
            k = even + 1j * odd
            base.append(k / np.sqrt(np.sum(np.abs(k) ** 2)))
        bank.append((base[0], base[1], np.rot90(base[0]), np.rot90(base[1])))
    return tuple(bank)


def _as_chw(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {image.shape[0]}")
        image = image[0]
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got shape {image.shape}")
    return image


def _grid_means(energy: np.ndarray, grid: int) -> np.ndarray:
    rows = np.array_split(np.arange(energy.shape[0]), grid)
    cols = np.array_split(np.arange(energy.shape[1]), grid)
    return np.array([[energy[np.ix_(r, c)].mean() for c in cols] for r in rows])


def _l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return np.zeros_like(v)
    return v / norm


def gist_descriptor(image) -> np.ndarray:
    """192-d oriented-energy descriptor: 3 scales x 4 orientations x 4x4 grid.

    Luminance (mean removed) is filtered with each complex Gabor kernel under
    reflect padding; the response magnitude is averaged over each grid cell.
    The vector is laid out ``[scale, orientation, row, col]`` and L2-normalised
    (all zeros for a flat image).
    """
    rgb = _as_chw(image)
    lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    lum = lum - lum.mean()
    feats = []
    for scale in gabor_bank():
        half = scale[0].shape[0] // 2
        padded = np.pad(lum, half, mode="reflect")
        for k in scale:
            resp = fftconvolve(padded, k[::-1, ::-1], mode="valid")
            feats.append(_grid_means(np.abs(resp), GIST_GRID))
    return _l2_normalize(np.concatenate([f.ravel() for f in feats]))


def lab_histogram(image) -> np.ndarray:
    """48-d colour descriptor: 16-bin marginals of L, a and b.

    Each marginal is L1-normalised, then the concatenation is L2-normalised.
    """
    rgb = _as_chw(image)
    lab = rgb_to_lab(np.moveaxis(np.clip(rgb, 0.0, 1.0), 0, -1)).reshape(-1, 3)
    hists = []
    for ch, (lo, hi) in enumerate(LAB_RANGES):
        h, _ = np.histogram(np.clip(lab[:, ch], lo, hi), bins=HIST_BINS, range=(lo, hi))
        hists.append(h / h.sum())
    return _l2_normalize(np.concatenate(hists))


@dataclass
class ImageDescriptor:
    gist: np.ndarray
    lab_hist: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.gist, self.lab_hist])


def describe(image) -> ImageDescriptor:
    return ImageDescriptor(gist_descriptor(image), lab_histogram(image))


def descriptor_distance(a, b) -> float:
    va = a.vector if isinstance(a, ImageDescriptor) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, ImageDescriptor) else np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.sum((va - vb) ** 2)))


@dataclass
class GroupSpec:
    members: list
    anchor: str | None = None
    source: str | None = None

    def to_dict(self) -> dict:
        d = {"members": list(self.members)}
        if self.anchor is not None:
            d["anchor"] = self.anchor
        if self.source is not None:
            d["source"] = self.source
        return d


def _matrix(descriptors) -> np.ndarray:
    rows = [d.vector if isinstance(d, ImageDescriptor) else np.atleast_1d(np.asarray(d, dtype=np.float64)) for d in descriptors]
    return np.stack(rows)


def build_training_groups(descriptors, k: int = 5, ids=None) -> list[GroupSpec]:
    """One group per image: the anchor first, then its k-1 nearest neighbours.

    Distances are Euclidean; equal distances go to the lower index.
    """
    mat = _matrix(descriptors)
    n = mat.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} images to build groups, got {n}")
    ids = [str(i) for i in range(n)] if ids is None else [str(i) for i in ids]
    if len(ids) != n:
        raise ValueError("ids and descriptors differ in length")
    groups = []
    for a in range(n):
        dist = np.sqrt(np.sum((mat - mat[a]) ** 2, axis=1))
        dist[a] = np.inf
        # lexsort: primary key distance, secondary key index
        order = np.lexsort((np.arange(n), dist))[: k - 1]
        groups.append(GroupSpec([ids[a]] + [ids[j] for j in order], anchor=ids[a]))
    return groups


def sample_eval_groups(members, k: int = 5, seed: int = 0, source=None) -> list[GroupSpec]:
    """Random k-subsets until every member has been used at least once.

    Each draw takes up to k still-uncovered members (without replacement); a
    short final draw is topped up with members already covered. With fewer
    than k members the group is padded by drawing members with replacement.
    """
    members = [str(m) for m in members]
    if not members:
        raise ValueError("sample_eval_groups needs at least one member")
    rng = np.random.default_rng(seed)
    if len(members) <= k:
        extra = [members[i] for i in rng.choice(len(members), size=k - len(members), replace=True)] if len(members) < k else []
        return [GroupSpec(members + extra, source=source)]
    uncovered = list(members)
    covered: list = []
    groups = []
    while uncovered:
        take = min(k, len(uncovered))
        picked_idx = sorted(rng.choice(len(uncovered), size=take, replace=False).tolist(), reverse=True)
        picked = [uncovered.pop(i) for i in picked_idx]
        if take < k:
            fill = rng.choice(len(covered), size=k - take, replace=False)
            picked += [covered[i] for i in fill]
        covered += [m for m in picked if m not in covered]
        groups.append(GroupSpec(picked, source=source))
    return groups


def groups_to_json(groups: list[GroupSpec], k: int) -> str:
    return json.dumps({"k": k, "groups": [g.to_dict() for g in groups]}, indent=2) + "\n"


def groups_from_json(text: str) -> tuple[int, list[GroupSpec]]:
    doc = json.loads(text)
    if not isinstance(doc, dict) or "k" not in doc or "groups" not in doc:
        raise ValueError("group file must be an object with 'k' and 'groups'")
    k = int(doc["k"])
    groups = []
    for g in doc["groups"]:
        members = [str(m) for m in g["members"]]
        if len(members) != k:
            raise ValueError(f"group {members} has {len(members)} members, expected {k}")
        groups.append(GroupSpec(members, anchor=g.get("anchor"), source=g.get("source")))
    return k, groups
