"""Group-input / group-output co-saliency network with a hand-written backward pass.

Layout for a group of K images:

* semantic block: 13 3x3 convs (ReLU) with 2x2 max pools, weights shared by all K images
* intra branch: 3 convs on the channel concatenation of the K semantic maps -> group feature X
* single branch: 3 convs applied to each semantic map (shared weights) -> x_i
* head: concat(x_i, X) -> 3x3 conv to one channel -> bilinear-initialised deconv -> R_i

The K images travel through the shared layers as one batch of size K. ``np.matmul``
evaluates each batch slice with the same kernel, so identical images produce
bit-identical maps.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .ops import (
    ConvParams,
    ShapeError,
    concat_channels,
    conv2d,
    conv2d_grad,
    deconv2d,
    deconv2d_grad,
    make_bilinear_kernel,
    maxpool2,
    maxpool2_grad,
    relu,
    relu_grad,
    split_channels,
)

PAPER_WIDTHS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
DESK_WIDTHS = (8, 8, 16, 16, 32, 32, 32, 64, 64, 64, 64, 64, 64)


@dataclass(frozen=True)
class NetConfig:
    k: int = 5
    profile: str = "desk"
    input_size: tuple = (128, 256)
    semantic_widths: tuple = DESK_WIDTHS
    # 0-based indices of the convs that are followed by a 2x2 pool
    pool_positions: tuple = (1, 3, 6)
    group_branch_width: int = 32
    single_branch_width: int = 32
    upsample_factor: int = 8
    # single-image ablation: the head sees concat(x_i, x_i) and the intra branch is unused
    single_image: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "semantic_widths", tuple(int(v) for v in self.semantic_widths))
        object.__setattr__(self, "pool_positions", tuple(int(v) for v in self.pool_positions))
        if len(self.semantic_widths) != 13:
            raise ValueError(f"semantic block needs 13 conv widths, got {len(self.semantic_widths)}")
        if self.k < 1:
            raise ValueError(f"group size must be positive, got {self.k}")
        if any(not 0 <= p < 13 for p in self.pool_positions) or len(set(self.pool_positions)) != len(self.pool_positions):
            raise ValueError(f"invalid pool positions {self.pool_positions}")
        if self.upsample_factor != self.stride:
            raise ValueError(
                f"upsample_factor {self.upsample_factor} must equal the pooling stride {self.stride}"
            )
        h, w = self.input_size
        if h % self.stride or w % self.stride:
            raise ValueError(f"input size {self.input_size} not divisible by stride {self.stride}")
        if self.single_image and self.group_branch_width != self.single_branch_width:
            raise ValueError("single-image mode needs equal group and single branch widths")

    @property
    def stride(self) -> int:
        return 2 ** len(self.pool_positions)

    @property
    def feature_size(self) -> tuple:
        return (self.input_size[0] // self.stride, self.input_size[1] // self.stride)

    @classmethod
    def desk(cls, **overrides) -> "NetConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "NetConfig":
        base = dict(
            profile="paper",
            semantic_widths=PAPER_WIDTHS,
            pool_positions=(1, 3, 6, 9),
            group_branch_width=128,
            single_branch_width=128,
            upsample_factor=16,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_profile(cls, profile: str, **overrides) -> "NetConfig":
        if profile == "desk":
            return cls.desk(**overrides)
        if profile == "paper":
            return cls.paper(**overrides)
        raise ValueError(f"unknown profile {profile!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("input_size", "semantic_widths", "pool_positions"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def conv_layout(cfg: NetConfig) -> list[tuple[str, int, int, int]]:
    """``(name, out_ch, in_ch, kernel)`` for every conv, in parameter order."""
    layers = []
    c_in = 3
    for i, width in enumerate(cfg.semantic_widths, start=1):
        layers.append((f"shared/conv{i}", width, c_in, 3))
        c_in = width
    c_sem = c_in
    gw, sw = cfg.group_branch_width, cfg.single_branch_width
    layers += [
        ("intra/conv1", gw, cfg.k * c_sem, 3),
        ("intra/conv2", gw, gw, 3),
        ("intra/conv3", gw, gw, 3),
        ("single/conv1", sw, c_sem, 3),
        ("single/conv2", sw, sw, 3),
        ("single/conv3", sw, sw, 3),
        ("collab/conv", 1, sw + gw, 3),
    ]
    return layers


def param_shapes(cfg: NetConfig) -> dict:
    """Name -> shape for every learnable tensor, in storage order."""
    shapes = {}
    for name, o, c, k in conv_layout(cfg):
        shapes[f"{name}/w"] = (o, c, k, k)
        shapes[f"{name}/b"] = (o,)
    f = cfg.upsample_factor
    size = 2 * f - f % 2
    shapes["collab/deconv/w"] = (1, 1, size, size)
    shapes["collab/deconv/b"] = (1,)
    return shapes


@dataclass
class ParamStore:
    """Learnable tensors and their momentum buffers, keyed by name.

    Names live in the ``shared/``, ``intra/``, ``single/`` and ``collab/``
    namespaces. Each name is stored once no matter how many group positions use it.
    """

    params: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.velocity.items()},
        )

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.velocity.items()},
        )


def init_params(cfg: NetConfig, seed: int, dtype=np.float32) -> ParamStore:
    """He-normal conv weights, zero biases, bilinear deconv.

    Weights are drawn in :func:`conv_layout` order from
    ``numpy.random.default_rng(seed)`` (PCG64) as float64 and then cast.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, o, c, k in conv_layout(cfg):
        std = np.sqrt(2.0 / (c * k * k))
        params[f"{name}/w"] = (rng.standard_normal((o, c, k, k)) * std).astype(dtype)
        params[f"{name}/b"] = np.zeros(o, dtype=dtype)
    params["collab/deconv/w"] = make_bilinear_kernel(cfg.upsample_factor, 1, dtype=dtype)
    params["collab/deconv/b"] = np.zeros(1, dtype=dtype)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return ParamStore(params, velocity)


def _conv(params, name, stride=1, pad=1):
    return ConvParams(params[f"{name}/w"], params[f"{name}/b"], stride, pad)


def _deconv(params, cfg):
    f = cfg.upsample_factor
    return ConvParams(params["collab/deconv/w"], params["collab/deconv/b"], f, f // 2)


def _conv_stack(x, params, names, final_relu=True, pools=()):
    """Run convs (+ReLU, + optional pools); return output and a tape for backward."""
    tape = []
    for i, name in enumerate(names):
        x, ctx = conv2d(x, _conv(params, name))
        tape.append(("conv", name, ctx))
        if final_relu or i < len(names) - 1:
            x, mask = relu(x)
            tape.append(("relu", name, mask))
        if i in pools:
            x, pctx = maxpool2(x)
            tape.append(("pool", name, pctx))
    return x, tape


def _conv_stack_backward(dy, tape, grads):
    for kind, name, ctx in reversed(tape):
        if kind == "conv":
            dy, dw, db = conv2d_grad(ctx, dy)
            grads[f"{name}/w"] = grads[f"{name}/w"] + dw if f"{name}/w" in grads else dw
            grads[f"{name}/b"] = grads[f"{name}/b"] + db if f"{name}/b" in grads else db
        elif kind == "relu":
            dy = relu_grad(ctx, dy)
        else:
            dy = maxpool2_grad(ctx, dy)
    return dy


SEMANTIC_NAMES = tuple(f"shared/conv{i}" for i in range(1, 14))
INTRA_NAMES = ("intra/conv1", "intra/conv2", "intra/conv3")
SINGLE_NAMES = ("single/conv1", "single/conv2", "single/conv3")


def _as_batch(images, cfg: NetConfig) -> np.ndarray:
    if isinstance(images, np.ndarray) and images.ndim == 4:
        batch = images
    else:
        imgs = list(images)
        for im in imgs:
            if im.ndim != 4 or im.shape[0] != 1:
                raise ShapeError(f"each image must have shape (1, 3, h, w), got {im.shape}")
        batch = np.concatenate(imgs, axis=0)
    h, w = cfg.input_size
    if batch.shape[0] != cfg.k:
        raise ShapeError(f"group has {batch.shape[0]} images, network is configured for K={cfg.k}")
    if batch.shape[1:] != (3, h, w):
        raise ShapeError(f"images must be (3, {h}, {w}), got {batch.shape[1:]}")
    return batch


def semantic_forward(image: np.ndarray, params: ParamStore, cfg: NetConfig):
    """Semantic feature s_i for a (n, 3, h, w) batch; returns ``(s, tape)``."""
    h, w = cfg.input_size
    if image.ndim != 4 or image.shape[1:] != (3, h, w):
        raise ShapeError(f"semantic_forward expects (n, 3, {h}, {w}), got {image.shape}")
    return _conv_stack(image, params, SEMANTIC_NAMES, pools=cfg.pool_positions)


def intra_forward(s, params: ParamStore, cfg: NetConfig):
    """Group feature X from the K semantic maps; returns ``(X, tape)``."""
    s = list(s) if not isinstance(s, np.ndarray) else [s[i : i + 1] for i in range(s.shape[0])]
    if len(s) != cfg.k:
        raise ShapeError(f"intra_forward got {len(s)} semantic maps, expected K={cfg.k}")
    if any(si.shape != s[0].shape for si in s):
        raise ShapeError("intra_forward: semantic maps differ in shape")
    return _conv_stack(concat_channels(s), params, INTRA_NAMES)


def single_forward(s, params: ParamStore, cfg: NetConfig):
    """Per-image feature x_i (works on any batch of semantic maps)."""
    expected = cfg.semantic_widths[-1]
    if s.ndim != 4 or s.shape[1] != expected:
        raise ShapeError(f"single_forward expects {expected} channels, got shape {s.shape}")
    return _conv_stack(s, params, SINGLE_NAMES)


def collaborative_forward(x, big_x, params: ParamStore, cfg: NetConfig):
    """Saliency maps from single features ``x`` (n, C, h, w) and group feature ``big_x`` (1, C', h, w)."""
    if x.shape[2:] != big_x.shape[2:]:
        raise ShapeError(f"collaborative_forward: spatial mismatch {x.shape} vs {big_x.shape}")
    n = x.shape[0]
    merged = concat_channels([x, np.broadcast_to(big_x, (n,) + big_x.shape[1:])])
    pre, cctx = conv2d(merged, _conv(params, "collab/conv"))
    r, dctx = deconv2d(pre, _deconv(params, cfg))
    return r, (cctx, dctx, x.shape[1])


@dataclass
class GroupActivations:
    s: np.ndarray  # (K, C_s, h', w') semantic features
    x: np.ndarray  # (K, C_single, h', w') single features
    big_x: np.ndarray  # (1, C_group, h', w') group feature
    r: np.ndarray  # (K, 1, h, w) saliency maps
    tapes: dict

    def maps(self) -> list[np.ndarray]:
        return [self.r[i : i + 1] for i in range(self.r.shape[0])]


def forward_group(images, params: ParamStore, cfg: NetConfig) -> GroupActivations:
    """Saliency maps for a group of K images, keeping everything needed for backward."""
    batch = _as_batch(images, cfg)
    s, sem_tape = semantic_forward(batch, params, cfg)
    x, single_tape = single_forward(s, params, cfg)
    if cfg.single_image:
        big_x, intra_tape = None, None
        r, head = _collab_single(x, params, cfg)
    else:
        big_x, intra_tape = intra_forward(s, params, cfg)
        r, head = collaborative_forward(x, big_x, params, cfg)
    tapes = {"semantic": sem_tape, "single": single_tape, "intra": intra_tape, "head": head}
    return GroupActivations(s, x, big_x, r, tapes)


def _collab_single(x, params, cfg):
    merged = concat_channels([x, x])
    pre, cctx = conv2d(merged, _conv(params, "collab/conv"))
    r, dctx = deconv2d(pre, _deconv(params, cfg))
    return r, (cctx, dctx, x.shape[1])


def backward_group(acts: GroupActivations, d_r, params: ParamStore, cfg: NetConfig) -> dict:
    """Gradients of every parameter given dL/dR for each group member.

    Parameters used at several group positions receive the sum of the
    per-position contributions. Returns a dict keyed like ``params.params``.
    """
    if not isinstance(d_r, np.ndarray):
        d_r = np.concatenate(list(d_r), axis=0)
    if d_r.shape != acts.r.shape:
        raise ShapeError(f"backward_group: dR shape {d_r.shape} != output shape {acts.r.shape}")
    d_r = d_r.astype(acts.r.dtype, copy=False)
    grads: dict = {}
    cctx, dctx, c_single = acts.tapes["head"]
    d_pre, grads["collab/deconv/w"], grads["collab/deconv/b"] = deconv2d_grad(dctx, d_r)
    d_merged, grads["collab/conv/w"], grads["collab/conv/b"] = conv2d_grad(cctx, d_pre)
    c_other = d_merged.shape[1] - c_single
    dx, d_other = split_channels(d_merged, [c_single, c_other])

    if cfg.single_image:
        dx = dx + d_other
        ds_intra = None
    else:
        # X is broadcast to every position: sum its gradient over positions 1..K in order
        d_big_x = d_other[0:1].copy()
        for i in range(1, d_other.shape[0]):
            d_big_x += d_other[i : i + 1]
        d_cat = _conv_stack_backward(d_big_x, acts.tapes["intra"], grads)
        ds_intra = d_cat.reshape(acts.s.shape)

    ds = _conv_stack_backward(dx, acts.tapes["single"], grads)
    if ds_intra is not None:
        ds = ds + ds_intra
    _conv_stack_backward(ds, acts.tapes["semantic"], grads)

    if cfg.single_image:
        for name in INTRA_NAMES:
            grads[f"{name}/w"] = np.zeros_like(params[f"{name}/w"])
            grads[f"{name}/b"] = np.zeros_like(params[f"{name}/b"])
    return {name: grads[name] for name in params.names()}


def predict(images, params: ParamStore, cfg: NetConfig) -> np.ndarray:
    """Forward pass only; returns raw (unclamped) maps of shape (K, 1, h, w)."""
    return forward_group(images, params, cfg).r
