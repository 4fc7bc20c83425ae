"""Training loops: dual-path label-assisted teacher, distilled student, plain baseline.

Every run writes three files into its output directory::

    <name>.weights          torch state dict
    <name>.manifest.json    configs, derived seeds, final metrics
    <name>.metrics.jsonl    one record per iteration

All randomness comes from the run seed through named substreams, so two runs
with the same config produce identical curves.
"""

from __future__ import annotations

import copy
import functools
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from lad.evaluation import evaluate_miou
from lad.lnm import concat_input, noise_label
from lad.losses import LossWeights, cross_entropy_seg, student_loss, teacher_loss
from lad.segnet import NetConfig, SegNet, build_net
from lad.synthdata import SegDataset, load_dataset

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
STREAMS = {"init": 0, "shuffle": 1, "noise": 2, "eval": 3}
POLY_POWER = 0.9
LR_SCHEDULES = {
    "constant": lambda it, total: 1.0,
    "poly": lambda it, total: (1.0 - it / total) ** POLY_POWER,
}


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class IncompatibleError(TrainingError):
    """Checkpoint, net and dataset disagree on channels or classes."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01
    lambda_consistency: float = 1.0
    beta_kd: float = 3.0
    temperature: float = 4.0
    learning_rate: float = 1e-3
    lr_schedule: str = "poly"
    iterations: int = 3000
    batch_size: int = 8
    seed: int = 0
    class_wise_noising: bool = True
    dual_path: bool = True
    shared_weights: bool = True
    symmetric_consistency: bool = True
    eval_every: int = 200
    net: NetConfig = field(default_factory=NetConfig)
    dataset: str = "data"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {sorted(LR_SCHEDULES)}")
        LossWeights(self.lambda_consistency, self.beta_kd, self.temperature)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_consistency, self.beta_kd, self.temperature)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if isinstance(kw.get("net"), dict):
            net_known = {f.name for f in fields(NetConfig)}
            kw["net"] = NetConfig(**{k: v for k, v in kw["net"].items() if k in net_known})
        return cls(**kw)


def derive_seed(seed: int, stream: str) -> int:
    ss = np.random.SeedSequence([int(seed), STREAMS[stream]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@functools.lru_cache(maxsize=1)
def code_digest() -> str:
    """Digest of the modules that determine a run's numbers; reuse is refused when it changes."""
    h = hashlib.sha256()
    for name in ("lnm", "losses", "segnet", "synthdata", "evaluation", "trainer"):
        h.update((Path(__file__).parent / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainResult:
    checkpoint: Path
    manifest: dict
    records: list[dict]
    net: SegNet

    @property
    def final_miou(self) -> float:
        return self.manifest["final_metrics"]["val_miou"]


# --------------------------------------------------------------------------- checkpoints


def checkpoint_paths(ref: str | os.PathLike) -> tuple[Path, Path, Path]:
    """Map a checkpoint reference (prefix or any of its files) to (weights, manifest, metrics)."""
    p = str(ref)
    for suffix in (".manifest.json", ".metrics.jsonl", ".weights"):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
            break
    return Path(p + ".weights"), Path(p + ".manifest.json"), Path(p + ".metrics.jsonl")


def save_checkpoint(net: SegNet, manifest: dict, ref: str | os.PathLike) -> Path:
    weights, man, _ = checkpoint_paths(ref)
    weights.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), weights)
    with open(man, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return weights.with_suffix("")


def read_checkpoint_manifest(ref: str | os.PathLike) -> dict:
    _, man, _ = checkpoint_paths(ref)
    if not man.is_file():
        raise CheckpointError(f"missing checkpoint manifest: {man}")
    with open(man) as fh:
        return json.load(fh)


def load_checkpoint(ref: str | os.PathLike) -> tuple[SegNet, dict]:
    weights, _, _ = checkpoint_paths(ref)
    manifest = read_checkpoint_manifest(ref)
    if not weights.is_file():
        raise CheckpointError(f"missing checkpoint weights: {weights}")
    try:
        net = SegNet(NetConfig(**manifest["net"]))
        net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    except Exception as exc:  # torch raises assorted types for truncated or foreign files
        raise CheckpointError(f"cannot load checkpoint {weights}: {exc}") from exc
    net.eval()
    return net, manifest


def read_metrics(ref: str | os.PathLike) -> list[dict]:
    _, _, metrics = checkpoint_paths(ref)
    with open(metrics) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------- loop


class _Batches:
    """Epoch-wise seeded permutations, cut into fixed-size batches."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(seed)
        self.order: np.ndarray = np.empty(0, dtype=np.int64)

    def next(self) -> torch.Tensor:
        while len(self.order) < self.batch_size:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[: self.batch_size], self.order[self.batch_size :]
        return torch.from_numpy(idx)


def _f(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _check_loss(value: torch.Tensor, it: int, parts: dict) -> None:
    if not math.isfinite(float(value.detach())):
        detail = ", ".join(f"{k}={_f(v):.4g}" for k, v in parts.items())
        raise TrainingError(f"non-finite loss at iteration {it}: {detail}")


def _load_splits(config: TrainConfig) -> tuple[SegDataset, SegDataset]:
    train = load_dataset(config.dataset, "train")
    val = load_dataset(config.dataset, "val")
    if train.num_classes != config.net.num_classes:
        raise IncompatibleError(
            f"dataset has {train.num_classes} classes but the net is configured for {config.net.num_classes}"
        )
    return train, val


def _try_reuse(ref: Path, run_hash: str) -> TrainResult | None:
    _, man, metrics = checkpoint_paths(ref)
    if not (man.is_file() and metrics.is_file()):
        return None
    try:
        net, manifest = load_checkpoint(ref)
    except (CheckpointError, OSError, RuntimeError, KeyError):
        return None
    if manifest.get("config_hash") != run_hash or manifest.get("code_digest") != code_digest():
        return None
    log.info("reusing finished run %s", ref)
    return TrainResult(ref, manifest, read_metrics(ref), net)


def _run(
    kind: str,
    config: TrainConfig,
    out_dir: str | os.PathLike,
    name: str,
    step,
    net: SegNet,
    params: list[torch.nn.Parameter],
    evaluate,
    extra_manifest: dict,
    reuse: bool,
) -> TrainResult:
    ref = Path(out_dir) / name
    identity = {"kind": kind, "config": config.to_dict(), **extra_manifest}
    run_hash = config_hash(identity)
    if reuse:
        found = _try_reuse(ref, run_hash)
        if found is not None:
            return found
    ref.parent.mkdir(parents=True, exist_ok=True)
    _, _, metrics_path = checkpoint_paths(ref)
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    factor = LR_SCHEDULES[config.lr_schedule]
    records: list[dict] = []
    start = time.perf_counter()
    last_miou = None
    with open(metrics_path, "w") as fh:
        for it in range(1, config.iterations + 1):
            net.train()
            for group in optimizer.param_groups:
                group["lr"] = config.learning_rate * factor(it - 1, config.iterations)
            total, ce, aux, extras = step(it)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            rec = {"iter": it, "loss_total": _f(total), "loss_ce": _f(ce), "loss_consis_or_kd": _f(aux)}
            rec.update(extras)
            if it % config.eval_every == 0 or it == config.iterations:
                last_miou = evaluate(net)
                rec["val_miou"] = last_miou
                log.info("%s %s it=%d loss=%.4f val_miou=%.4f", kind, name, it, rec["loss_total"], last_miou)
            records.append(rec)
            fh.write(json.dumps(rec) + "\n")
    if last_miou is None:
        last_miou = evaluate(net)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "name": name,
        "config_hash": run_hash,
        "code_digest": code_digest(),
        "seed": config.seed,
        "net": net.config.to_dict(),
        "train": config.to_dict(),
        "optimizer": {"name": "adam", "learning_rate": config.learning_rate, "schedule": config.lr_schedule,
                      "poly_power": POLY_POWER},
        "streams": {k: derive_seed(config.seed, k) for k in STREAMS},
        "final_metrics": {"val_miou": last_miou, "iterations": config.iterations},
        "wall_clock_seconds": time.perf_counter() - start,
        **extra_manifest,
    }
    save_checkpoint(net, manifest, ref)
    return TrainResult(ref, manifest, records, net)


def _init_net(config: TrainConfig, in_channels: int) -> SegNet:
    if config.net.in_channels != in_channels:
        raise IncompatibleError(f"expected a {in_channels}-channel net, config has {config.net.in_channels}")
    return build_net(replace(config.net, seed=derive_seed(config.seed, "init")))


def _teacher_evaluator(val: SegDataset, config: TrainConfig, alpha: float, class_wise: bool):
    def evaluate(net):
        gen = torch.Generator().manual_seed(derive_seed(config.seed, "eval"))
        return evaluate_miou(net, val.images, val.labels, alpha, gen, class_wise)[0]

    return evaluate


def _rgb_evaluator(val: SegDataset):
    def evaluate(net):
        return evaluate_miou(net, val.images, val.labels)[0]

    return evaluate


def train_teacher(config: TrainConfig, out_dir=".", name: str = "teacher", reuse: bool = False) -> TrainResult:
    """Label-assisted teacher.

    Each iteration noises every label twice with independent parameters and
    runs both inputs through the network, then takes one optimizer step on
    CE(path 1) + CE(path 2) + lambda * consistency. ``shared_weights=False``
    trains two independent copies instead and keeps the first one.
    ``dual_path=False`` is the single-path, CE-only ablation.
    """
    train, val = _load_splits(config)
    net = _init_net(config, 4)
    second = copy.deepcopy(net) if (config.dual_path and not config.shared_weights) else net
    params = list(net.parameters()) + ([] if second is net else list(second.parameters()))
    batches = _Batches(len(train), config.batch_size, derive_seed(config.seed, "shuffle"))
    noise_gen = torch.Generator().manual_seed(derive_seed(config.seed, "noise"))
    weights = config.loss_weights
    num_classes = config.net.num_classes

    def noised(y):
        return noise_label(y, num_classes, config.alpha, noise_gen, config.class_wise_noising)

    def step(it):
        idx = batches.next()
        x, y = train.images[idx], train.labels[idx]
        if not config.dual_path:
            ce = cross_entropy_seg(net(concat_input(x, noised(y))), y)
            _check_loss(ce, it, {"ce": ce})
            return ce, ce, 0.0, {}
        second.train()
        o1 = net(concat_input(x, noised(y)))
        o2 = second(concat_input(x, noised(y)))
        total, parts = teacher_loss(o1, o2, y, weights, config.symmetric_consistency)
        _check_loss(total, it, parts)
        extras = {"consistency_raw": _f(parts["consistency"])}
        return total, parts["ce1"] + parts["ce2"], parts["weighted_consistency"], extras

    evaluate = _teacher_evaluator(val, config, config.alpha, config.class_wise_noising)
    return _run("teacher", config, out_dir, name, step, net, params, evaluate, {}, reuse)


def train_student(
    config: TrainConfig, teacher_checkpoint, out_dir=".", name: str = "student", reuse: bool = False
) -> TrainResult:
    """RGB student distilled from a frozen label-assisted teacher.

    The teacher sees labels noised with its own training settings (alpha and
    class-wise mode from its manifest), resampled every iteration.
    """
    teacher, teacher_manifest = load_checkpoint(teacher_checkpoint)
    if teacher.config.in_channels != 4:
        raise IncompatibleError("teacher checkpoint is not label-assisted (needs 4 input channels)")
    if teacher.config.num_classes != config.net.num_classes:
        raise IncompatibleError(
            f"teacher predicts {teacher.config.num_classes} classes, student {config.net.num_classes}"
        )
    for p in teacher.parameters():
        p.requires_grad_(False)
    t_train = teacher_manifest["train"]
    t_alpha, t_class_wise = float(t_train["alpha"]), bool(t_train["class_wise_noising"])

    train, val = _load_splits(config)
    net = _init_net(config, 3)
    batches = _Batches(len(train), config.batch_size, derive_seed(config.seed, "shuffle"))
    noise_gen = torch.Generator().manual_seed(derive_seed(config.seed, "noise"))
    weights = config.loss_weights
    num_classes = config.net.num_classes

    def step(it):
        idx = batches.next()
        x, y = train.images[idx], train.labels[idx]
        logits = net(x)
        if config.beta_kd == 0:
            ce = cross_entropy_seg(logits, y)
            _check_loss(ce, it, {"ce": ce})
            return ce, ce, 0.0, {}
        with torch.no_grad():
            teacher.eval()
            t_in = concat_input(x, noise_label(y, num_classes, t_alpha, noise_gen, t_class_wise))
            t_logits = teacher(t_in)
        total, parts = student_loss(logits, t_logits, y, weights)
        _check_loss(total, it, parts)
        return total, parts["ce"], parts["weighted_kd"], {}

    t_weights, t_man, _ = checkpoint_paths(teacher_checkpoint)
    extra = {
        "teacher_checkpoint": str(t_weights.with_suffix("")),
        "teacher_config_hash": teacher_manifest.get("config_hash"),
        "teacher_noise": {"alpha": t_alpha, "class_wise_noising": t_class_wise},
    }
    return _run("student", config, out_dir, name, step, net, list(net.parameters()),
                _rgb_evaluator(val), extra, reuse)


def train_baseline(config: TrainConfig, out_dir=".", name: str = "baseline", reuse: bool = False) -> TrainResult:
    """Plain supervised RGB training (cross-entropy only)."""
    train, val = _load_splits(config)
    net = _init_net(config, 3)
    batches = _Batches(len(train), config.batch_size, derive_seed(config.seed, "shuffle"))

    def step(it):
        idx = batches.next()
        ce = cross_entropy_seg(net(train.images[idx]), train.labels[idx])
        _check_loss(ce, it, {"ce": ce})
        return ce, ce, 0.0, {}

    return _run("baseline", config, out_dir, name, step, net, list(net.parameters()),
                _rgb_evaluator(val), {}, reuse)
