"""Run configuration: flat ``section.key=value`` text files.

Example::

    dataset.kind=synthetic
    dataset.seed=7
    arch.widths=8,16,32
    train.epochs=30
    engine.K=6
    out_dir=runs/demo
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import Dataset, load_idx, synthetic_blobs
from .engine import EngineConfig
from .errors import ValidationError
from .nn import NetworkSpec, TrainConfig, resnet_spec
from .similarity import parse_metric


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | idx
    seed: int = 7
    classes: int = 4
    samples: int = 2048
    test_samples: int = 1024
    image_size: int = 16
    channels: int = 3
    noise: float = 0.25
    jitter: float = 0.12
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, ...] = (8, 16, 32)
    blocks: tuple[int, ...] = (3, 3, 3)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, lr_schedule=((20, 0.1),)))
    engine: EngineConfig = field(default_factory=EngineConfig)
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if not self.arch.widths or min(self.arch.widths) <= 0 or min(self.arch.blocks, default=0) <= 0:
            raise ValidationError("arch widths and block counts must be positive")
        if self.dataset.kind == "idx":
            for name in ("train_images", "train_labels"):
                path = getattr(self.dataset, name)
                if not path or not Path(path).exists():
                    raise ValidationError(f"dataset.{name}: file {path!r} does not exist")
        elif self.dataset.kind != "synthetic":
            raise ValidationError(f"unknown dataset.kind {self.dataset.kind!r}")
        self.engine.validate()

    def load_data(self) -> tuple[Dataset, Dataset]:
        """(train, held-out) datasets."""
        d = self.dataset
        if d.kind == "idx":
            train = load_idx(d.train_images, d.train_labels)
            if d.test_images:
                test = load_idx(d.test_images, d.test_labels, train.num_classes)
            else:
                test = train
            return train, test
        full = synthetic_blobs(
            d.seed, d.classes, d.samples + d.test_samples, d.image_size, d.channels, d.jitter, noise=d.noise
        )
        return full.subset(slice(0, d.samples)), full.subset(slice(d.samples, None))

    def network_spec(self, train: Dataset) -> NetworkSpec:
        return resnet_spec(self.arch.widths, self.arch.blocks, train.input_shape, train.num_classes)


def _convert(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(current, int) or (current is None and key.endswith("threads")):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if key == "lr_schedule":
            pairs = [p for p in raw.split(",") if p.strip()]
            return tuple((int(e), float(m)) for e, m in (p.split(":") for p in pairs))
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key == "metric":
            return parse_metric(raw)
        return raw
    except ValueError:
        raise ValidationError(f"bad value {raw!r} for {key}") from None


def _set(obj, key: str, raw: str, section: str):
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ValidationError(f"unknown config key {section}.{key}")
    return replace(obj, **{key: _convert(raw, getattr(obj, key), key)})


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        if len(parts) == 1:
            cfg = _set(cfg, parts[0], value, "")
        elif len(parts) == 2 and parts[0] in ("dataset", "arch", "train", "engine"):
            section = getattr(cfg, parts[0])
            cfg = replace(cfg, **{parts[0]: _set(section, parts[1], value, parts[0])})
        elif len(parts) == 3 and parts[:2] == ["engine", "finetune"]:
            ft = _set(cfg.engine.finetune, parts[2], value, "engine.finetune")
            cfg = replace(cfg, engine=replace(cfg.engine, finetune=ft))
        else:
            raise ValidationError(f"line {lineno}: unknown key {key}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
