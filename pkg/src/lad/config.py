"""Experiment configuration: one document holding dataset, nets, training and eval settings.

Configs are YAML (JSON is accepted too, being a subset) with
``format_version: 1``. Unknown keys are rejected so typos do not silently
fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from lad.segnet import NetConfig
from lad.synthdata import DatasetSpec
from lad.trainer import TrainConfig, config_hash

FORMAT_VERSION = 1
DEFAULT_ALPHAS = (0.0, 1e-3, 1e-2, 1e-1, 1.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    m: int = 3
    stability_images: int = 20
    saliency_images: int = 20
    saliency_draws: int = 4
    alphas: tuple[float, ...] = DEFAULT_ALPHAS


@dataclass(frozen=True)
class NetShape:
    base_width: int = 32
    depth: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    data_dir: str = "data"
    teacher_net: NetShape = field(default_factory=NetShape)
    student_net: NetShape = field(default_factory=NetShape)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "runs"

    def train_config(self, role: str, **overrides) -> TrainConfig:
        """TrainConfig for ``role`` in {"teacher", "student", "baseline"} with the right net."""
        shape = self.teacher_net if role == "teacher" else self.student_net
        net = NetConfig(
            in_channels=4 if role == "teacher" else 3,
            num_classes=self.dataset.num_classes,
            base_width=shape.base_width,
            depth=shape.depth,
        )
        return replace(self.train, net=net, dataset=self.data_dir, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("net")
        d["train"].pop("dataset")
        d["eval"]["alphas"] = list(self.eval.alphas)
        return {"format_version": FORMAT_VERSION, **d}

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_manifest(manifest: dict) -> ExperimentConfig:
    """Rebuild the experiment config that produced a run manifest."""
    train = dict(manifest["train"])
    net = train.pop("net")
    data_dir = train.pop("dataset")
    shape = NetShape(net["base_width"], net["depth"])
    dataset = DatasetSpec(num_classes=net["num_classes"])
    ds_manifest = Path(data_dir) / "manifest.json"
    if ds_manifest.is_file():
        dataset = DatasetSpec.from_dict(json.loads(ds_manifest.read_text())["spec"])
    return ExperimentConfig(
        dataset=dataset,
        data_dir=data_dir,
        teacher_net=shape,
        student_net=shape,
        train=TrainConfig(**train),
    )


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    if "kind" in data and isinstance(data.get("train"), dict) and "net" in data["train"]:
        return from_manifest(data)
    version = data.pop("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported format_version {version!r}")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    train = dict(data.get("train") or {})
    for k in ("net", "dataset"):
        train.pop(k, None)
    ev = dict(data.get("eval") or {})
    if "alphas" in ev:
        ev["alphas"] = tuple(float(a) for a in ev["alphas"])
    return ExperimentConfig(
        dataset=_build(DatasetSpec, data.get("dataset"), "dataset"),
        data_dir=str(data.get("data_dir", "data")),
        teacher_net=_build(NetShape, data.get("teacher_net"), "teacher_net"),
        student_net=_build(NetShape, data.get("student_net"), "student_net"),
        train=_build(TrainConfig, train, "train"),
        eval=_build(EvalConfig, ev, "eval"),
        out=str(data.get("out", "runs")),
    )


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(data or {})


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        path.write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    else:
        path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
