"""``lad`` command line: data generation, training, diagnostics and the alpha sweep.

Exit codes: 0 ok, 1 internal error, 2 usage or IO error. ``LAD_THREADS``
caps the number of worker processes times torch threads.
"""

from __future__ import annotations

import argparse
import logging
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import torch
import yaml

from lad import experiments as ex
from lad.config import ConfigError, ExperimentConfig, from_dict
from lad.report import append_block, plot_sweep, sweep_rows, write_table
from lad.synthdata import DatasetError, generate_dataset
from lad.trainer import (
    CheckpointError,
    IncompatibleError,
    read_checkpoint_manifest,
    train_baseline,
    train_student,
    train_teacher,
)

log = logging.getLogger("lad")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def thread_budget() -> int:
    raw = os.environ.get("LAD_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LAD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"LAD_THREADS must be a positive integer, got {raw!r}")
    return n


def _parse_alphas(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(a) for a in text.split(",") if a.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad alpha list {text!r}") from None
    if not values or any(a < 0 for a in values):
        raise argparse.ArgumentTypeError("alphas must be a non-empty list of non-negative numbers")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON experiment config or a run manifest")
    common.add_argument("--seed", type=int, help="training seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train a teacher, student or baseline")
    t.add_argument("mode", choices=["teacher", "student", "baseline"])
    t.add_argument("--name", help="run name (file prefix inside --out)")
    t.add_argument("--teacher-checkpoint", help="frozen teacher for student training")
    t.add_argument("--alpha", type=float, help="label noise scale")
    t.add_argument("--no-consistency", action="store_true", help="single path, cross-entropy only")
    t.add_argument("--no-class-wise", action="store_true", help="pixel-wise noise on the normalized label")
    t.add_argument("--clean-label", action="store_true", help="normalized raw label, alpha = 0")
    t.add_argument("--iterations", type=int)
    t.add_argument("--reuse", action="store_true", help="skip training when an identical run exists")

    for name, helptext in (("eval", "val mIoU of a checkpoint"),
                           ("stability", "output fluctuation under label-noise resampling"),
                           ("shortcut", "label-channel vs RGB saliency ratio")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("checkpoint")
        if name == "stability":
            e.add_argument("-m", type=int, default=None, help="noise resamplings per image (default 3)")
        if name != "eval":
            e.add_argument("--images", type=int, help="number of val images (default 20)")
        if name == "shortcut":
            e.add_argument("--draws", type=int, help="noise draws per image (default 4)")
            e.add_argument("--reference", help="second teacher to compare against, image by image")
            e.add_argument("--factor", type=float, default=3.0, help="ratio threshold for the comparison")

    s = sub.add_parser("sweep-alpha", parents=[common], help="teacher/student grid over alpha and noising mode")
    s.add_argument("--alphas", type=_parse_alphas, help="comma-separated list (default 0,1e-3,1e-2,1e-1,1)")
    s.add_argument("--modes", choices=["both", "class-wise", "pixel-wise"], default="both")
    s.add_argument("--iterations", type=int)
    return p


def _load_document(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return doc


def resolve_config(args) -> tuple[ExperimentConfig, dict]:
    """Config file (or defaults) with command-line flags applied on top."""
    doc = _load_document(args.config) if args.config else {}
    config = from_dict(doc)
    train_kw = {}
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        if args.iterations < 0:
            raise UsageError("--iterations must be >= 0")
        train_kw["iterations"] = args.iterations
    if train_kw:
        config = replace(config, train=replace(config.train, **train_kw))
    if args.data:
        config = replace(config, data_dir=args.data)
    if args.out and args.command != "gen-data":
        config = replace(config, out=args.out)
    return config, doc


def cmd_gen_data(args) -> int:
    config, _ = resolve_config(args)
    out = Path(args.out or config.data_dir)
    manifest = generate_dataset(config.dataset, out)
    total = sum(hi - lo for lo, hi in manifest["splits"].values())
    print(f"wrote {total} samples to {out} (manifest {out / 'manifest.json'})")
    return EXIT_OK


def cmd_train(args) -> int:
    config, doc = resolve_config(args)
    out = Path(config.out)
    name = args.name or args.mode
    if args.mode == "teacher":
        kw = ex.teacher_overrides(
            alpha=args.alpha,
            class_wise=not args.no_class_wise,
            consistency=not args.no_consistency,
            clean_label=args.clean_label,
        )
        result = train_teacher(config.train_config("teacher", **kw), out, name, reuse=args.reuse)
    elif args.mode == "student":
        ckpt = args.teacher_checkpoint or doc.get("teacher_checkpoint")
        if not ckpt:
            raise UsageError("train student needs --teacher-checkpoint")
        result = train_student(config.train_config("student"), ckpt, out, name, reuse=args.reuse)
    else:
        result = train_baseline(config.train_config("baseline"), out, name, reuse=args.reuse)
    m = result.manifest
    block = {
        "run": name, "kind": m["kind"], "checkpoint": str(result.checkpoint), "config_hash": m["config_hash"],
        "seed": m["seed"], "val_miou": result.final_miou,
    }
    if m["kind"] == "teacher":
        block.update(alpha=m["train"]["alpha"], class_wise_noising=m["train"]["class_wise_noising"],
                     dual_path=m["train"]["dual_path"])
    elif m["kind"] == "student":
        block.update(teacher_checkpoint=m["teacher_checkpoint"], teacher_noise=m["teacher_noise"])
    append_block(out, "train", block)
    print(f"{m['kind']} {name}: val mIoU {result.final_miou:.4f} -> {result.checkpoint}.weights")
    return EXIT_OK


def _checkpoint_context(args) -> tuple[dict, Path, Path]:
    manifest = read_checkpoint_manifest(args.checkpoint)
    data = Path(args.data or manifest["train"]["dataset"])
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    return manifest, data, out


def _eval_settings(args):
    if args.config:
        return from_dict(_load_document(args.config)).eval
    return ExperimentConfig().eval


def cmd_eval(args) -> int:
    manifest, data, out = _checkpoint_context(args)
    res = ex.eval_checkpoint(args.checkpoint, data, args.seed)
    append_block(out, "eval", {"checkpoint": str(args.checkpoint), "config_hash": manifest["config_hash"],
                               "dataset": str(data), **res})
    print(f"val mIoU {res['val_miou']:.4f}")
    return EXIT_OK


def cmd_stability(args) -> int:
    settings = _eval_settings(args)
    m = settings.m if args.m is None else args.m
    if m < 1:
        raise UsageError("-m must be >= 1")
    n = args.images or settings.stability_images
    manifest, data, out = _checkpoint_context(args)
    res = ex.stability_checkpoint(args.checkpoint, data, m, n, args.seed or 0)
    append_block(out, "stability", {"checkpoint": str(args.checkpoint), "config_hash": manifest["config_hash"], **res})
    print(f"KL_mean {res['kl_mean']:.6g} (x100 {res['kl_mean_x100']:.4f}) over {res['images']} images, m={m}")
    return EXIT_OK


def cmd_shortcut(args) -> int:
    settings = _eval_settings(args)
    n = args.images or settings.saliency_images
    draws = args.draws or settings.saliency_draws
    manifest, data, out = _checkpoint_context(args)
    res = ex.saliency_checkpoint(args.checkpoint, data, n, draws, args.seed or 0)
    payload = {"checkpoint": str(args.checkpoint), "config_hash": manifest["config_hash"], **res}
    print(f"saliency ratio median {res['median']:.4g} over {res['images']} images")
    if args.reference:
        ref = ex.saliency_checkpoint(args.reference, data, n, draws, args.seed or 0)
        ratio = [a / b if b > 0 else float("inf") for a, b in zip(res["saliency_ratio"], ref["saliency_ratio"])]
        wins = sum(r >= args.factor for r in ratio)
        payload.update(reference=str(args.reference), reference_saliency_ratio=ref["saliency_ratio"],
                       ratio_to_reference=ratio, factor=args.factor, images_at_factor=wins)
        print(f"{wins}/{len(ratio)} images at >= {args.factor:g}x the reference ratio")
    append_block(out, "shortcut", payload)
    return EXIT_OK


def _sweep_cell(config: ExperimentConfig, out: str, seed: int, alpha: float, class_wise: bool, threads: int) -> dict:
    torch.set_num_threads(threads)
    kw = ex.teacher_overrides(alpha=alpha, class_wise=class_wise)
    teacher = ex.run_teacher(config, out, seed, **kw)
    student = ex.run_student(config, teacher, out, seed)
    return {
        "alpha": alpha,
        "class_wise": class_wise,
        "teacher_miou": teacher.final_miou,
        "student_miou": student.final_miou,
        "teacher_checkpoint": str(teacher.checkpoint),
        "student_checkpoint": str(student.checkpoint),
        "teacher_config_hash": teacher.manifest["config_hash"],
        "student_config_hash": student.manifest["config_hash"],
    }


def cmd_sweep_alpha(args) -> int:
    config, _ = resolve_config(args)
    alphas = args.alphas or config.eval.alphas
    modes = {"both": (True, False), "class-wise": (True,), "pixel-wise": (False,)}[args.modes]
    seed = config.train.seed
    out = Path(config.out)
    ex.ensure_dataset(config)
    grid = [(a, cw) for cw in modes for a in alphas]
    budget = thread_budget()
    workers = max(1, min(budget, len(grid)))
    per_worker = max(1, budget // workers)
    log.info("sweep: %d cells on %d worker(s) x %d thread(s)", len(grid), workers, per_worker)
    if workers == 1:
        cells = [_sweep_cell(config, str(out), seed, a, cw, per_worker) for a, cw in grid]
        baseline = ex.run_baseline(config, out, seed)
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = [pool.submit(_sweep_cell, config, str(out), seed, a, cw, per_worker) for a, cw in grid]
            base_future = pool.submit(_baseline_cell, config, str(out), seed, per_worker)
            cells = [f.result() for f in futures]
            baseline = base_future.result()
    columns, rows = sweep_rows(cells, alphas)
    provenance = {
        "config_hash": config.hash,
        "seed": seed,
        "dataset": str(config.data_dir),
        "iterations": config.train.iterations,
        "baseline_miou": baseline.final_miou,
        "baseline_checkpoint": str(baseline.checkpoint),
        "cells": cells,
    }
    write_table(out / "sweep_alpha", "teacher / student val mIoU by label-noise scale", columns, rows, provenance)
    plot_sweep(cells, alphas, out / "sweep_alpha.png", baseline.final_miou)
    print((out / "sweep_alpha.txt").read_text(), end="")
    return EXIT_OK


def _baseline_cell(config, out, seed, threads):
    torch.set_num_threads(threads)
    return ex.run_baseline(config, out, seed)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "stability": cmd_stability,
    "shortcut": cmd_shortcut,
    "sweep-alpha": cmd_sweep_alpha,
}

USAGE_ERRORS = (UsageError, ConfigError, DatasetError, CheckpointError, IncompatibleError, OSError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        torch.set_num_threads(thread_budget())
        return COMMANDS[args.command](args)
    except USAGE_ERRORS as exc:
        print(f"lad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"lad {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
