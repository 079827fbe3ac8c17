"""Command-line entry point: ``gwcosal group|train|infer|eval|gradcheck``.

Exit codes: 0 success, 1 gradient check failed, 2 usage or input error,
3 numerical divergence during training.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .grouping import build_training_groups, describe, groups_from_json, groups_to_json, sample_eval_groups
from .metrics import EvalPair, evaluate
from .net import init_params, predict
from .train import DivergenceError, Sample, fit

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3

# descriptors are computed on images brought to a common size
DESCRIPTOR_SIZE = (128, 256)


def _fail(msg: str) -> int:
    print(f"gwcosal: error: {msg}", file=sys.stderr)
    return EXIT_INPUT


# ---------------------------------------------------------------- group


def cmd_group(args) -> int:
    manifest = io.load_manifest(args.manifest) if args.manifest else io.scan_directory(args.images)
    ids = manifest.ids
    if len(ids) < args.k:
        return _fail(f"need at least k={args.k} images, found {len(ids)} under {args.images or args.manifest}")
    if args.mode == "train":
        descs = [describe(io.bilinear_resize(io.read_image(manifest.image(i)), DESCRIPTOR_SIZE)) for i in ids]
        groups = build_training_groups(descs, k=args.k, ids=ids)
    else:
        declared = manifest.groups or {"all": ids}
        groups = []
        for offset, name in enumerate(sorted(declared)):
            groups += sample_eval_groups(declared[name], k=args.k, seed=args.seed + offset, source=name)
    Path(args.out).write_text(groups_to_json(groups, args.k))
    print(f"wrote {len(groups)} groups to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _load_samples(group_path, manifest, cfg) -> list[Sample]:
    try:
        k, groups = groups_from_json(Path(group_path).read_text())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise io.InputError(f"cannot read groups file {group_path}: {exc}") from exc
    if k != cfg.net.k:
        raise io.InputError(f"groups file has k={k} but the network expects k={cfg.net.k}")
    size = cfg.net.input_size
    samples = []
    for g in groups:
        images = np.concatenate([io.load_image_resized(manifest.image(i), size, cfg.mean) for i in g.members])
        gt = np.concatenate([io.load_mask_resized(manifest.mask(i), size) for i in g.members])
        samples.append(Sample(images, gt))
    return samples


def cmd_train(args) -> int:
    cfg = io.RunConfig.load(args.config)
    if args.max_iters is not None:
        cfg.train.max_iters = args.max_iters
    images = Path(args.images) if args.images else cfg.images
    masks = Path(args.masks) if args.masks else cfg.masks
    if images is None or masks is None:
        return _fail("image and mask directories must be given in the run config or with --images/--masks")
    manifest = io.scan_directory(images, masks)
    samples = _load_samples(args.groups, manifest, cfg)
    if not samples:
        return _fail(f"groups file {args.groups} contains no groups")

    if args.init_weights:
        params, _ = io.load_weights(args.init_weights, expected_cfg=cfg.net)
        params = params.astype(np.float32)
    else:
        params = init_params(cfg.net, cfg.init_seed)

    log_fh = open(args.log, "w") if args.log else None

    def log(line):
        print(line)
        if log_fh:
            log_fh.write(line + "\n")

    def snapshot(it, p):
        io.save_weights(p, cfg.net, f"{args.out}.iter{it}.gwcs")

    try:
        fit(samples, params, cfg.net, cfg.train, on_snapshot=snapshot, log=log)
    except DivergenceError as exc:
        print(f"gwcosal: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        if log_fh:
            log_fh.close()
    io.save_weights(params, cfg.net, args.out)
    print(f"wrote weights to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- infer


def _output_names(paths) -> list[str]:
    stems = [Path(p).stem for p in paths]
    return [s if stems.count(s) == 1 else f"{s}_{i}" for i, s in enumerate(stems)]


def cmd_infer(args) -> int:
    params, net_cfg = io.load_weights(args.weights)
    if len(args.images) != net_cfg.k:
        return _fail(f"the network takes exactly k={net_cfg.k} images, got {len(args.images)}")
    batch = np.concatenate([io.load_image_resized(p, net_cfg.input_size, args.mean, params[params.names()[0]].dtype) for p in args.images])
    maps = predict(batch, params, net_cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, r in zip(_output_names(args.images), maps):
        io.save_saliency_png(r, out_dir / f"{name}.png")
    print(f"wrote {len(maps)} saliency maps to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _stems(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise io.InputError(f"directory {directory} does not exist")
    out = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.suffix.lower() in io.IMAGE_EXTS:
            key = p.relative_to(directory).with_suffix("").as_posix()
            if key in out:
                raise io.InputError(f"duplicate id {key!r} in {directory}")
            out[key] = p
    return out


def cmd_eval(args) -> int:
    pred, gt = _stems(args.pred), _stems(args.gt)
    only_pred, only_gt = sorted(set(pred) - set(gt)), sorted(set(gt) - set(pred))
    if only_pred or only_gt:
        lines = [f"  prediction without ground truth: {i}" for i in only_pred]
        lines += [f"  ground truth without prediction: {i}" for i in only_gt]
        return _fail("ids do not match:\n" + "\n".join(lines))
    if not pred:
        return _fail(f"no images found in {args.pred}")
    pairs = []
    for key in sorted(pred):
        sal = io.read_gray(pred[key]).astype(np.float64) / 255.0
        mask = io.load_mask_binary(gt[key])
        if sal.shape != mask.shape:
            return _fail(f"{key}: prediction {sal.shape} and ground truth {mask.shape} differ in size")
        pairs.append(EvalPair(sal, mask, key))
    report = evaluate(pairs)
    report.write_json(args.out)
    if args.pr_csv:
        report.write_pr_csv(args.pr_csv)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps({k: getattr(report, k) for k in ("mF", "MAE", "AUC", "AP")}))
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import GRADIENT_CHECKS

    ok = True
    for name, fn in GRADIENT_CHECKS.items():
        worst = max(fn(s, args.eps) for s in range(args.seeds))
        passed = worst <= args.tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max relative error {worst:.3e} over {args.seeds} seeds")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gwcosal", description="Group-wise co-saliency network tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("group", help="form training or evaluation groups")
    p.add_argument("--mode", choices=("train", "eval"), default="train")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", help="corpus directory (subdirectories declare groups)")
    src.add_argument("--manifest", help="JSON dataset manifest")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("train", help="train from a run config and a groups file")
    p.add_argument("--config", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--out", required=True, help="final weights file")
    p.add_argument("--images", help="overrides paths.images")
    p.add_argument("--masks", help="overrides paths.masks")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--init-weights")
    p.add_argument("--log", help="also write the loss lines here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="saliency maps for one group of images")
    p.add_argument("--weights", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mean", type=float, nargs=3, default=io.DEFAULT_MEAN)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pr-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    n = os.environ.get("GWCOSAL_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (io.InputError, io.WeightsFormatError, OSError) as exc:
        return _fail(str(exc))
    except ValueError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
