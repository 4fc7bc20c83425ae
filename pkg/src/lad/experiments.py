"""Named experiment arms and teacher diagnostics, shared by the CLI and the acceptance gate."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from lad.config import ExperimentConfig
from lad.evaluation import evaluate_miou, saliency_ratio, stability
from lad.synthdata import DatasetError, DatasetSpec, generate_dataset, load_dataset, read_manifest
from lad.trainer import (
    IncompatibleError,
    TrainResult,
    derive_seed,
    load_checkpoint,
    train_baseline,
    train_student,
    train_teacher,
)

log = logging.getLogger(__name__)


def ensure_dataset(config: ExperimentConfig, data_dir=None) -> Path:
    """Generate the dataset unless an identical one already sits in ``data_dir``."""
    path = Path(data_dir or config.data_dir)
    if (path / "manifest.json").is_file():
        existing = DatasetSpec.from_dict(read_manifest(path)["spec"])
        if existing != config.dataset:
            raise DatasetError(f"{path} holds a dataset generated from a different spec")
        return path
    log.info("generating dataset in %s", path)
    generate_dataset(config.dataset, path)
    return path


def teacher_overrides(
    alpha: float | None = None,
    class_wise: bool = True,
    consistency: bool = True,
    clean_label: bool = False,
) -> dict:
    """TrainConfig overrides for a teacher ablation arm.

    ``clean_label`` feeds the normalized raw label (no class-wise weights, no
    noise). Whenever alpha is 0 without class-wise weights both paths see the
    same input, so the second path is dropped.
    """
    kw: dict = {}
    if clean_label:
        alpha, class_wise = 0.0, False
    if alpha is not None:
        kw["alpha"] = float(alpha)
    if not class_wise:
        kw["class_wise_noising"] = False
    if not consistency:
        kw["dual_path"] = False
    if kw.get("alpha") == 0.0 and not class_wise:
        kw["dual_path"] = False
    return kw


def arm_name(role: str, seed: int, **overrides) -> str:
    parts = [role]
    if "alpha" in overrides:
        parts.append(f"a{overrides['alpha']:g}")
    if overrides.get("class_wise_noising") is False:
        parts.append("pix")
    if overrides.get("dual_path") is False:
        parts.append("single")
    parts.append(f"s{seed}")
    return "_".join(parts)


def run_baseline(config: ExperimentConfig, out_dir, seed: int, reuse: bool = True) -> TrainResult:
    cfg = config.train_config("baseline", seed=seed)
    return train_baseline(cfg, out_dir, arm_name("baseline", seed), reuse=reuse)


def run_teacher(config: ExperimentConfig, out_dir, seed: int, reuse: bool = True, **overrides) -> TrainResult:
    cfg = config.train_config("teacher", seed=seed, **overrides)
    return train_teacher(cfg, out_dir, arm_name("teacher", seed, **overrides), reuse=reuse)


def run_student(config: ExperimentConfig, teacher: TrainResult, out_dir, seed: int, reuse: bool = True) -> TrainResult:
    cfg = config.train_config("student", seed=seed)
    name = "student_" + Path(teacher.checkpoint).name
    return train_student(cfg, teacher.checkpoint, out_dir, name, reuse=reuse)


def _val_subset(data_dir, num_images: int):
    val = load_dataset(data_dir, "val")
    n = min(num_images, len(val))
    return val, val.images[:n], val.labels[:n]


def _teacher_noise(manifest: dict) -> tuple[float, bool]:
    t = manifest["train"]
    return float(t["alpha"]), bool(t["class_wise_noising"])


def load_teacher(checkpoint, data_dir):
    net, manifest = load_checkpoint(checkpoint)
    if net.config.in_channels != 4:
        raise IncompatibleError(f"{checkpoint} is a {net.config.in_channels}-channel net with no label channel")
    num_classes = int(read_manifest(data_dir)["num_classes"])
    if num_classes != net.config.num_classes:
        raise IncompatibleError(f"checkpoint predicts {net.config.num_classes} classes, dataset has {num_classes}")
    return net, manifest


def eval_checkpoint(checkpoint, data_dir, seed: int | None = None) -> dict:
    """Val mIoU of any checkpoint; label-assisted nets see labels noised as in their training."""
    net, manifest = load_checkpoint(checkpoint)
    val = load_dataset(data_dir, "val")
    if val.num_classes != net.config.num_classes:
        raise IncompatibleError(f"checkpoint predicts {net.config.num_classes} classes, dataset has {val.num_classes}")
    seed = manifest["seed"] if seed is None else seed
    if net.config.in_channels == 4:
        alpha, class_wise = _teacher_noise(manifest)
        gen = torch.Generator().manual_seed(derive_seed(seed, "eval"))
        value, iou = evaluate_miou(net, val.images, val.labels, alpha, gen, class_wise)
    else:
        value, iou = evaluate_miou(net, val.images, val.labels)
    return {"val_miou": value, "per_class_iou": [None if np.isnan(v) else float(v) for v in iou]}


def stability_checkpoint(checkpoint, data_dir, m: int = 3, num_images: int = 20, seed: int = 0) -> dict:
    net, manifest = load_teacher(checkpoint, data_dir)
    alpha, class_wise = _teacher_noise(manifest)
    _, images, labels = _val_subset(data_dir, num_images)
    gen = torch.Generator().manual_seed(derive_seed(seed, "eval"))
    rep = stability(net, images, labels, m, alpha, gen, class_wise)
    return {"kl_mean": rep.kl_mean, "kl_mean_x100": rep.kl_mean_x100, "m": m,
            "images": len(images), "per_image": rep.per_image, "alpha": alpha, "class_wise_noising": class_wise}


def saliency_checkpoint(checkpoint, data_dir, num_images: int = 20, draws: int = 4, seed: int = 0) -> dict:
    net, manifest = load_teacher(checkpoint, data_dir)
    alpha, class_wise = _teacher_noise(manifest)
    _, images, labels = _val_subset(data_dir, num_images)
    gen = torch.Generator().manual_seed(derive_seed(seed, "eval"))
    ratios = [saliency_ratio(net, x, y, alpha, gen, draws, class_wise) for x, y in zip(images, labels)]
    return {"saliency_ratio": ratios, "median": float(np.median(ratios)), "images": len(ratios),
            "draws": draws, "alpha": alpha, "class_wise_noising": class_wise}
