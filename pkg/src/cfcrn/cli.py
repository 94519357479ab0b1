"""Command-line entry point: ``cfcrn <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .config import RunConfig
from .evaluation import count_cells, extract_centroids
from .experiments import evaluate_model, load_samples, predict_count, run_crossval
from .model import build_params
from .synthetic import SyntheticSpec, generate_synthetic, read_dataset, write_dataset
from .targets import KernelSpec, ProximitySpec, density_map, make_lrgt, proximity_map
from .trainer import preprocess, select_lr, train


def _pair(text: str, typ=int):
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two values like 128x128, got {text!r}")
    return typ(parts[0]), typ(parts[1])


def _run_config(args) -> RunConfig:
    raw = fileio.read_config(args.config) if args.config else {}
    overrides = {
        "arch": args.arch, "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
        "patch_size": args.patch_size, "patches_per_image": args.patches_per_image,
        "width": args.width, "seed": args.seed, "amplification": args.amplification,
        "val_fraction": args.val_fraction, "sigma": args.sigma,
    }
    for k, v in overrides.items():
        if v is not None:
            raw[k] = str(v)
    if args.no_aux:
        raw["aux_enabled"] = "false"
    if args.no_augment:
        raw["augment"] = "false"
    if args.select_lr:
        raw["select_lr"] = "true"
    if "arch" in raw and raw["arch"] == "fcrn" and "aux_enabled" not in raw:
        raw["aux_enabled"] = "false"
    return RunConfig.from_dict(raw)


def _add_train_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--arch", choices=("fcrn", "cfcrn"))
    p.add_argument("--no-aux", action="store_true", help="train C-FCRN without auxiliary heads")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--select-lr", action="store_true", help="line-search the learning rate first")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--patches-per-image", type=int)
    p.add_argument("--width", type=float, help="channel-width multiplier (1 = full network)")
    p.add_argument("--seed", type=int)
    p.add_argument("--amplification", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--sigma", type=float)


def cmd_gen_data(args) -> int:
    if args.spec:
        spec = SyntheticSpec.from_strings(fileio.read_config(args.spec))
    else:
        kw = {"n_images": args.n, "dims": args.dims, "seed": args.seed}
        if args.counts:
            kw["count_range"] = args.counts
        if args.no_overlap:
            kw["overlap_allowed"] = False
        spec = SyntheticSpec(**kw)
    write_dataset(args.out, generate_synthetic(spec), spec)
    print(f"wrote {spec.n_images} images to {args.out}")
    return 0


def cmd_make_targets(args) -> int:
    kernel = KernelSpec(args.sigma, args.half_width)
    prox = ProximitySpec(args.prox_alpha, args.prox_d)
    out = Path(args.data) / "targets"
    out.mkdir(parents=True, exist_ok=True)
    items = read_dataset(args.data)
    for it in items:
        full = density_map(it.centroids, kernel)
        fileio.write_tensor(out / f"{it.image_id}.density.dct", full)
        for k, lr in enumerate(make_lrgt(full), start=1):
            fileio.write_tensor(out / f"{it.image_id}.lr{k}.dct", lr)
        if len(it.centroids):
            fileio.write_tensor(out / f"{it.image_id}.prox.dct", proximity_map(it.centroids, prox))
    print(f"wrote targets for {len(items)} images to {out}")
    return 0


def _split(samples, fraction: float, seed: int):
    if len(samples) < 2 or fraction <= 0:
        return list(samples), []
    n_val = max(1, int(round(fraction * len(samples))))
    perm = np.random.default_rng(seed).permutation(len(samples))
    val = {int(i) for i in perm[:n_val]}
    return [s for i, s in enumerate(samples) if i not in val], [s for i, s in enumerate(samples) if i in val]


def cmd_train(args) -> int:
    rc = _run_config(args)
    samples = load_samples(args.data, rc.kernel)
    tr, va = _split(samples, rc.val_fraction, rc.train.seed)
    cfg = rc.train
    if rc.select_lr:
        lr = select_lr(cfg.lr_candidates, tr, va, cfg, arch=rc.arch, aux=rc.aux_enabled, width=rc.width)
        cfg = replace(cfg, lr=lr)
        rc.train = cfg
        print(f"selected learning rate {lr:g}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = build_params(rc.arch, cfg.seed, aux=rc.aux_enabled, width=rc.width)
    state = train(params, tr, cfg, val_data=va, use_aux=rc.aux_enabled, run_dir=out)
    rc.save(out / "config.txt")
    last = state.history[-1]
    print(f"trained {state.epoch} epochs: train L_cmb {last['train_lcmb']:.6g}, val L {last['val_l']:.6g}")
    return 0


def cmd_count(args) -> int:
    if args.density:
        dens = fileio.read_tensor(args.density)[0, 0]
        n = count_cells(dens, args.amplification)
    else:
        if not (args.checkpoint and args.image):
            raise ValueError("count needs --density, or both --checkpoint and --image")
        params = fileio.load_checkpoint(args.checkpoint)
        x = preprocess(fileio.read_image(args.image), params.in_channels).data[0]
        n, dens = predict_count(params, x, args.amplification)
        if args.density_out:
            fileio.write_tensor(args.density_out, dens)
    if args.centroids_out:
        pts = extract_centroids(dens / args.amplification, args.min_distance, args.threshold)
        fileio.write_annotations(args.centroids_out, pts.points)
    print(f"{n:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    params = fileio.load_checkpoint(args.checkpoint)
    samples = load_samples(args.data, require_targets=False)
    report = evaluate_model(params, samples, args.amplification)
    if args.out:
        report.write_csv(args.out)
    print(report.summary_line())
    return 0


def cmd_crossval(args) -> int:
    rc = _run_config(args)
    samples = load_samples(args.data, rc.kernel)
    results, pooled = run_crossval(samples, rc.train, k=args.k, arch=rc.arch, aux=rc.aux_enabled,
                                   width=rc.width, out_dir=args.out, search_lr=rc.select_lr, jobs=args.jobs)
    for r in results:
        print(f"fold {r.fold}: lr {r.lr:g} {r.report.summary_line()}")
    print(f"aggregate: {pooled.summary_line()}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(quick=not args.full)
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfcrn", description="Deeply-supervised density-regression cell counting")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesise a labelled image set")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--dims", type=_pair, default=(256, 256))
    p.add_argument("--counts", type=_pair, help="min,max cells per image")
    p.add_argument("--no-overlap", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="key = value synthetic spec file (overrides other flags)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("make-targets", help="density, LR and proximity maps from annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--half-width", type=int, default=10)
    p.add_argument("--prox-alpha", type=float, default=3.0)
    p.add_argument("--prox-d", type=float, default=15.0)
    p.set_defaults(func=cmd_make_targets)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("count", help="count cells in one image or density file")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--density", help="density tensor file (amplified scale) to integrate directly")
    p.add_argument("--amplification", type=float, default=100.0)
    p.add_argument("--density-out")
    p.add_argument("--centroids-out")
    p.add_argument("--min-distance", type=float, default=3.0)
    p.add_argument("--threshold", type=float, default=0.005)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("evaluate", help="count every image of a labelled set and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--amplification", type=float, default=100.0)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_opts(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("selftest", help="gradient checks and invariants")
    p.add_argument("--full", action="store_true", help="include the end-to-end network check")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for any failure
        print(f"cfcrn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
