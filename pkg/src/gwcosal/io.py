"""Files in and out: images, masks, saliency PNGs, weights, manifests and run configs."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image, UnidentifiedImageError

from .net import NetConfig, ParamStore, param_shapes
from .train import TrainConfig

DEFAULT_MEAN = (0.485, 0.456, 0.406)
IMAGE_EXTS = (".png", ".jpg", ".jpeg")


class InputError(ValueError):
    """Bad user input: unreadable files, mismatched ids, malformed documents."""


# ---------------------------------------------------------------- images


def read_image(path) -> np.ndarray:
    """Decode to float64 RGB in [0, 1], shape (3, h, w)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return np.moveaxis(arr, -1, 0) / 255.0


def read_gray(path) -> np.ndarray:
    """Decode to an 8-bit single-channel array (h, w)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def bilinear_resize(arr: np.ndarray, size: tuple) -> np.ndarray:
    """Resize (c, h, w) to (c, *size) with half-pixel-centre bilinear sampling, no antialiasing."""
    c, h, w = arr.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return arr.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    top = arr[:, y0][:, :, x0] + (arr[:, y0][:, :, x1] - arr[:, y0][:, :, x0]) * fx
    bot = arr[:, y1][:, :, x0] + (arr[:, y1][:, :, x1] - arr[:, y1][:, :, x0]) * fx
    return top + (bot - top) * fy[:, None]


def normalize(rgb: np.ndarray, mean=DEFAULT_MEAN) -> np.ndarray:
    return rgb - np.asarray(mean, dtype=np.float64).reshape((-1, 1, 1))


def load_image_resized(path, size=(128, 256), mean=DEFAULT_MEAN, dtype=np.float32) -> np.ndarray:
    """Network input: resized RGB in [0, 1] minus the per-channel mean, shape (1, 3, h, w)."""
    rgb = bilinear_resize(read_image(path), tuple(size))
    return normalize(rgb, mean)[None].astype(dtype)


def load_mask_resized(path, size=(128, 256), dtype=np.float32) -> np.ndarray:
    """Training target: mask binarised at 128, then resized; shape (1, 1, h, w), values in [0, 1]."""
    binary = (read_gray(path) >= 128).astype(np.float64)[None]
    return np.clip(bilinear_resize(binary, tuple(size)), 0.0, 1.0)[None].astype(dtype)


def load_mask_binary(path) -> np.ndarray:
    return read_gray(path) >= 128


def saliency_to_uint8(r: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(r, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_saliency_png(r: np.ndarray, path) -> None:
    """Write a map as 8-bit grayscale PNG, clamped to [0, 1]."""
    r = np.asarray(r)
    r = r.reshape(r.shape[-2:])
    Image.fromarray(saliency_to_uint8(r), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------- weights

MAGIC = b"GWCS"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class WeightsFormatError(ValueError):
    pass


def encode_weights(params: ParamStore, cfg: NetConfig) -> bytes:
    """Serialise parameters (not momentum) in the GWCS layout.

    ``"GWCS"``, u32 version, u32 length + UTF-8 JSON config echo, u32 count,
    then per tensor: u32 length + UTF-8 name, u32 rank, u32 dims, u8 precision
    tag (1 = float32, 2 = float64), little-endian row-major values.
    """
    out = bytearray(MAGIC)
    cfg_bytes = cfg.to_json().encode("utf-8")
    out += struct.pack("<II", VERSION, len(cfg_bytes)) + cfg_bytes
    out += struct.pack("<I", len(params.params))
    for name, arr in params.params.items():
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise WeightsFormatError(f"unsupported dtype {arr.dtype} for {name}")
        name_bytes = name.encode("utf-8")
        out += struct.pack("<I", len(name_bytes)) + name_bytes
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<B", tag)
        out += np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes()
    return bytes(out)


def decode_weights(data: bytes, expected_cfg: NetConfig | None = None):
    """Parse GWCS bytes into ``(ParamStore, NetConfig)``; nothing is returned on any error."""
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightsFormatError(f"truncated weights file (need {n} bytes at offset {pos}, have {len(data) - pos})")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    if take(4) != MAGIC:
        raise WeightsFormatError("bad magic: not a GWCS weights file")
    version = u32()
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights format version {version}")
    try:
        cfg_doc = json.loads(take(u32()).decode("utf-8"))
        cfg = NetConfig.from_dict(cfg_doc)
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
        if isinstance(exc, WeightsFormatError):
            raise
        raise WeightsFormatError(f"invalid config echo: {exc}") from exc
    if expected_cfg is not None and cfg.to_json() != expected_cfg.to_json():
        raise WeightsFormatError(f"config mismatch: file has {cfg.to_json()}, expected {expected_cfg.to_json()}")
    params = {}
    for _ in range(u32()):
        try:
            name = take(u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightsFormatError(f"tensor name is not UTF-8: {exc}") from exc
        rank = u32()
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        tag = struct.unpack("<B", take(1))[0]
        if tag not in _TAG_DTYPES:
            raise WeightsFormatError(f"unknown precision tag {tag} for {name}")
        dt = _TAG_DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(count * dt.itemsize), dtype=dt).reshape(dims)
        params[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(data):
        raise WeightsFormatError(f"{len(data) - pos} trailing bytes after last tensor")
    expected = param_shapes(cfg)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(got) & set(expected) if got[k] != expected[k])
        raise WeightsFormatError(f"tensors do not match the network layout (missing {missing}, unexpected {extra}, wrong shape {wrong})")
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return ParamStore(params, velocity), cfg


def save_weights(params: ParamStore, cfg: NetConfig, path) -> None:
    data = encode_weights(params, cfg)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_weights(path, expected_cfg: NetConfig | None = None):
    with open(path, "rb") as fh:
        return decode_weights(fh.read(), expected_cfg)


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    root: Path
    entries: dict  # id -> (image path, mask path or None)
    groups: dict | None = None  # declared group name -> list of ids

    def validate(self):
        for img_id, (image, mask) in self.entries.items():
            if not Path(image).is_file():
                raise InputError(f"{img_id}: image file {image} does not exist")
            if mask is not None and not Path(mask).is_file():
                raise InputError(f"{img_id}: mask file {mask} does not exist")
        for name, ids in (self.groups or {}).items():
            missing = [i for i in ids if i not in self.entries]
            if missing:
                raise InputError(f"group {name} references unknown ids {missing}")
        return self

    @property
    def ids(self) -> list:
        return sorted(self.entries)

    def image(self, img_id):
        try:
            return self.entries[img_id][0]
        except KeyError:
            raise InputError(f"unknown image id {img_id!r}") from None

    def mask(self, img_id):
        mask = self.entries[img_id][1] if img_id in self.entries else None
        if mask is None:
            raise InputError(f"no ground-truth mask for image id {img_id!r}")
        return mask


def _images_in(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


def _find_mask(masks_dir, rel_stem):
    if masks_dir is None:
        return None
    for ext in IMAGE_EXTS:
        cand = Path(masks_dir) / f"{rel_stem}{ext}"
        if cand.is_file():
            return cand
    return None


def scan_directory(images_dir, masks_dir=None) -> DatasetManifest:
    """Manifest from a directory: loose files form a flat corpus, subdirectories declare groups.

    Ids are file stems (``sub/stem`` inside subdirectories); masks are looked up
    by the same relative stem under ``masks_dir``.
    """
    root = Path(images_dir)
    if not root.is_dir():
        raise InputError(f"image directory {root} does not exist")
    entries, groups = {}, {}
    for p in _images_in(root):
        if p.stem in entries:
            raise InputError(f"duplicate image id {p.stem!r} in {root}")
        entries[p.stem] = (p, _find_mask(masks_dir, p.stem))
    for sub in sorted(d for d in root.iterdir() if d.is_dir()):
        ids = []
        for p in _images_in(sub):
            img_id = f"{sub.name}/{p.stem}"
            if img_id in entries:
                raise InputError(f"duplicate image id {img_id!r}")
            entries[img_id] = (p, _find_mask(masks_dir, img_id))
            ids.append(img_id)
        if ids:
            groups[sub.name] = ids
    return DatasetManifest(root, entries, groups or None).validate()


def load_manifest(path) -> DatasetManifest:
    """Read a JSON manifest ``{"root", "entries": {id: {"image", "mask"}}, "groups"}``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    jsonschema_validate(doc, MANIFEST_SCHEMA, f"manifest {path}")
    root = (path.parent / doc.get("root", ".")).resolve()
    entries = {}
    for img_id, e in doc["entries"].items():
        mask = e.get("mask")
        entries[img_id] = (root / e["image"], root / mask if mask else None)
    return DatasetManifest(root, entries, doc.get("groups")).validate()


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["entries"],
    "properties": {
        "root": {"type": "string"},
        "entries": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["image"],
                "properties": {"image": {"type": "string"}, "mask": {"type": ["string", "null"]}},
                "additionalProperties": False,
            },
        },
        "groups": {
            "type": ["object", "null"],
            "additionalProperties": {"type": "array", "items": {"type": "string"}},
        },
    },
    "additionalProperties": False,
}


# ---------------------------------------------------------------- run config

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "net": {
            "type": "object",
            "properties": {
                "profile": {"enum": ["desk", "paper"]},
                "k": {"type": "integer", "minimum": 1},
                "input_size": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
                "semantic_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 13, "maxItems": 13},
                "pool_positions": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 12}},
                "group_branch_width": {"type": "integer", "minimum": 1},
                "single_branch_width": {"type": "integer", "minimum": 1},
                "upsample_factor": {"type": "integer", "minimum": 1},
                "single_image": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "preset": {"enum": ["desk", "paper"]},
                "lr": {"type": "number", "minimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "max_iters": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer"},
                "loss_reduction": {"enum": ["sum", "mean"]},
                "snapshot_every": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "init_seed": {"type": "integer"},
        "mean": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "paths": {
            "type": "object",
            "properties": {"images": {"type": "string"}, "masks": {"type": "string"}},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def jsonschema_validate(doc, schema, what):
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"{what}: {loc}: {exc.message}") from None


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    init_seed: int = 0
    mean: tuple = DEFAULT_MEAN
    images: Path | None = None
    masks: Path | None = None

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "RunConfig":
        jsonschema_validate(doc, RUN_CONFIG_SCHEMA, "run config")
        net_doc = dict(doc.get("net", {}))
        profile = net_doc.pop("profile", "desk")
        train_doc = dict(doc.get("train", {}))
        preset = train_doc.pop("preset", "desk")
        try:
            net = NetConfig.from_profile(profile, **net_doc)
            train = TrainConfig.paper(**train_doc) if preset == "paper" else TrainConfig(**train_doc)
        except (TypeError, ValueError) as exc:
            raise InputError(f"run config: {exc}") from None
        paths = doc.get("paths", {})
        base = Path(base_dir)
        return cls(
            net=net,
            train=train,
            init_seed=doc.get("init_seed", 0),
            mean=tuple(doc.get("mean", DEFAULT_MEAN)),
            images=base / paths["images"] if "images" in paths else None,
            masks=base / paths["masks"] if "masks" in paths else None,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read run config {path}: {exc}") from exc
        return cls.from_dict(doc, base_dir=path.parent)
