"""Synthetic training experiments shared by the scripts and the acceptance tests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .grouping import GroupSpec, groups_to_json
from .io import DEFAULT_MEAN
from .metrics import EvalPair, mean_f_adaptive
from .net import NetConfig, ParamStore, init_params, predict
from .synthetic import SyntheticGroup, make_groups
from .train import History, Sample, TrainConfig, fit, group_loss

SYNTH_SIZE = (64, 128)


def to_sample(group: SyntheticGroup, mean=DEFAULT_MEAN) -> Sample:
    mu = np.asarray(mean, dtype=np.float64).reshape(1, 3, 1, 1)
    return Sample((group.images - mu).astype(np.float32), group.masks.astype(np.float32))


def dataset_loss(samples, params: ParamStore, cfg: NetConfig, reduction="mean") -> float:
    """Average per-group loss over ``samples`` at fixed parameters."""
    return float(np.mean([group_loss(predict(s.images, params, cfg), s.gt, reduction)[0] for s in samples]))


def dataset_mf(samples, params: ParamStore, cfg: NetConfig) -> float:
    pairs = []
    for s in samples:
        maps = np.clip(predict(s.images, params, cfg), 0.0, 1.0)
        pairs += [EvalPair(maps[i, 0], s.gt[i, 0] > 0.5) for i in range(len(maps))]
    return mean_f_adaptive(pairs)


@dataclass
class OverfitResult:
    initial_loss: float
    final_loss: float
    train_mf: float
    history: History
    params: ParamStore

    @property
    def ratio(self) -> float:
        return self.final_loss / self.initial_loss


def overfit_run(n_groups=8, iters=2000, lr=1e-3, seed=0, log=None) -> OverfitResult:
    """Train the desk network on a handful of synthetic groups and measure how far the loss falls."""
    cfg = NetConfig.desk(input_size=SYNTH_SIZE)
    samples = [to_sample(g) for g in make_groups(n_groups, seed)]
    params = init_params(cfg, seed)
    initial = dataset_loss(samples, params, cfg)
    history = fit(samples, params, cfg, TrainConfig(lr=lr, max_iters=iters, seed=seed), log=log)
    return OverfitResult(initial, dataset_loss(samples, params, cfg), dataset_mf(samples, params, cfg), history, params)


@dataclass
class RegionSaliency:
    common: np.ndarray  # mean saliency inside the common object, one value per group
    distractor: np.ndarray  # mean saliency inside distractor objects, one value per group


def region_saliency(groups, params: ParamStore, cfg: NetConfig) -> RegionSaliency:
    common, distractor = [], []
    for g in groups:
        r = np.clip(predict(to_sample(g).images, params, cfg), 0.0, 1.0)
        common.append(r[g.masks > 0].mean())
        distractor.append(r[g.distractors > 0].mean())
    return RegionSaliency(np.array(common), np.array(distractor))


@dataclass
class InteractionResult:
    group: RegionSaliency
    single: RegionSaliency
    passed: np.ndarray = field(repr=False)

    @property
    def pass_rate(self) -> float:
        return float(self.passed.mean())


def group_vs_single_run(n_train=40, n_eval=20, iters=2000, lr=1e-3, seed=0, eval_seed=1000, log=None) -> InteractionResult:
    """Train a group model and a single-image ablation on the same data; compare them on held-out groups.

    A held-out group passes when the group model keeps distractors below the
    common object and below the ablation's distractor saliency.
    """
    train = [to_sample(g) for g in make_groups(n_train, seed)]
    held_out = make_groups(n_eval, eval_seed)
    scores = {}
    for single in (False, True):
        cfg = NetConfig.desk(input_size=SYNTH_SIZE, single_image=single)
        params = init_params(cfg, seed)
        fit(train, params, cfg, TrainConfig(lr=lr, max_iters=iters, seed=seed), log=log)
        scores[single] = region_saliency(held_out, params, cfg)
    grp, sgl = scores[False], scores[True]
    passed = (grp.distractor < grp.common) & (grp.distractor < sgl.distractor)
    return InteractionResult(grp, sgl, passed)


def write_corpus(out, n_groups=8, seed=0, k=5, size=SYNTH_SIZE, max_iters=2000, net=None) -> Path:
    """Write synthetic groups as PNGs plus a groups file and a run config.

    Layout: ``images/gNN/iK.png``, ``masks/gNN/iK.png`` (0 or 255),
    ``groups.json`` with the generator's own groups and ``run.json``.
    """
    out = Path(out)
    groups = []
    for g, group in enumerate(make_groups(n_groups, seed, k=k, size=size)):
        name = f"g{g:02d}"
        for sub in ("images", "masks"):
            (out / sub / name).mkdir(parents=True, exist_ok=True)
        members = []
        for i in range(k):
            rgb = np.round(np.moveaxis(group.images[i], 0, -1) * 255).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(out / "images" / name / f"i{i}.png")
            mask = (group.masks[i, 0] * 255).astype(np.uint8)
            Image.fromarray(mask, mode="L").save(out / "masks" / name / f"i{i}.png")
            members.append(f"{name}/i{i}")
        groups.append(GroupSpec(members, source=name))
    (out / "groups.json").write_text(groups_to_json(groups, k))
    run = {
        "net": net or {"profile": "desk", "k": k, "input_size": list(size)},
        "train": {"lr": 1e-3, "max_iters": max_iters, "loss_reduction": "mean", "seed": 0},
        "init_seed": 0,
        "paths": {"images": "images", "masks": "masks"},
    }
    (out / "run.json").write_text(json.dumps(run, indent=2) + "\n")
    return out
