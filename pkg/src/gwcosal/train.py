"""Supervised training on image groups: squared-error loss and momentum SGD."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .net import NetConfig, ParamStore, backward_group, forward_group
from .ops import ShapeError, sgd_update


class DivergenceError(FloatingPointError):
    def __init__(self, iteration, loss):
        super().__init__(f"training diverged at iteration {iteration}: loss = {loss}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.99
    weight_decay: float = 0.0005
    max_iters: int = 2000
    seed: int = 0
    loss_reduction: str = "mean"
    snapshot_every: int = 0  # 0 disables snapshots

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Original hyperparameters: tiny rate on summed loss, 60k iterations."""
        base = dict(lr=1e-10, loss_reduction="sum", max_iters=60000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    """One training group: images (K, 3, h, w) and ground truth (K, 1, h, w) in [0, 1]."""

    images: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.gt.ndim != 4:
            raise ShapeError("images and gt must be 4-D")
        if self.images.shape[0] != self.gt.shape[0]:
            raise ShapeError(f"{self.images.shape[0]} images but {self.gt.shape[0]} ground-truth maps")
        if self.gt.shape[1] != 1 or self.gt.shape[2:] != self.images.shape[2:]:
            raise ShapeError(f"gt shape {self.gt.shape} does not match images {self.images.shape}")
        if self.gt.min() < 0 or self.gt.max() > 1:
            raise ValueError("ground-truth values must lie in [0, 1]")


@dataclass
class History:
    losses: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)


def group_loss(r, gt, reduction: str = "mean"):
    """Squared Frobenius error summed over the group, and its gradient wrt ``r``.

    With ``reduction="mean"`` both are divided by the total pixel count.
    """
    r = np.asarray(r) if isinstance(r, np.ndarray) else np.concatenate(list(r), axis=0)
    gt = np.asarray(gt) if isinstance(gt, np.ndarray) else np.concatenate(list(gt), axis=0)
    if r.shape != gt.shape:
        raise ShapeError(f"group_loss: prediction shape {r.shape} != ground truth {gt.shape}")
    diff = r - gt.astype(r.dtype, copy=False)
    loss = float(np.sum(np.square(diff, dtype=np.float64)))
    d_r = 2 * diff
    if reduction == "mean":
        loss /= diff.size
        d_r = d_r / diff.size
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss, d_r


def train_step(sample: Sample, params: ParamStore, net_cfg: NetConfig, train_cfg: TrainConfig, iteration=None) -> float:
    """One SGD step on one group; returns the loss before the update."""
    acts = forward_group(sample.images, params, net_cfg)
    loss, d_r = group_loss(acts.r, sample.gt, train_cfg.loss_reduction)
    if not np.isfinite(loss):
        raise DivergenceError(iteration, loss)
    grads = backward_group(acts, d_r, params, net_cfg)
    # compute every update first so a non-finite value leaves the store untouched
    updated = {}
    try:
        for name in params.names():
            updated[name] = sgd_update(
                params.params[name],
                grads[name],
                params.velocity[name],
                train_cfg.lr,
                train_cfg.momentum,
                train_cfg.weight_decay,
            )
    except FloatingPointError:
        raise DivergenceError(iteration, loss) from None
    for name, (p, v) in updated.items():
        params.params[name], params.velocity[name] = p, v
    return loss


def fit(
    samples: list[Sample],
    params: ParamStore,
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    on_snapshot: Callable | None = None,
    log: Callable | None = None,
) -> History:
    """Cycle through ``samples`` in a seeded shuffle order for ``max_iters`` steps.

    ``log`` receives one ``"iter <n> loss <value>"`` line per step and
    ``on_snapshot(iteration, params)`` is called every ``snapshot_every`` steps.
    """
    if not samples:
        raise ValueError("fit needs at least one sample")
    rng = np.random.default_rng(train_cfg.seed)
    history = History()
    order: list = []
    for it in range(1, train_cfg.max_iters + 1):
        if not order:
            order = list(rng.permutation(len(samples)))
        sample = samples[order.pop(0)]
        loss = train_step(sample, params, net_cfg, train_cfg, iteration=it)
        history.losses.append(loss)
        if log is not None:
            log(f"iter {it} loss {loss:.9g}")
        if train_cfg.snapshot_every and it % train_cfg.snapshot_every == 0:
            history.snapshots.append(it)
            if on_snapshot is not None:
                on_snapshot(it, params)
    return history
