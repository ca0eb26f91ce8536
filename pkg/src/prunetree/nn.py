"""Residual conv-net substrate: topology specs, parameters, forward/backward, SGD, FLOPs.

Networks are described by immutable spec dataclasses and hold their weights in an
ordered ``name -> tensor`` store, so surgery can rewrite both without touching any
``nn.Module`` machinery. All arithmetic goes through ``torch.nn.functional``; gradients
come from autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .errors import StructuralError, TrainingDiverged, PreconditionError

MIN_PROBE = 4


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return ho, wo


@dataclass(frozen=True)
class BlockSpec:
    """Two 3x3 convs plus a shortcut; ``shortcut is None`` means identity."""

    conv1: ConvSpec
    conv2: ConvSpec
    shortcut: ConvSpec | None = None

    @property
    def removable(self) -> bool:
        return self.shortcut is None

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels

    @property
    def stride(self) -> int:
        return self.conv1.stride


@dataclass(frozen=True)
class Stage:
    blocks: tuple[BlockSpec, ...]
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    stages: tuple[Stage, ...]
    num_classes: int
    stem: ConvSpec | None = None

    # -- derived quantities

    @property
    def feature_dim(self) -> int:
        width = self.stem.out_channels if self.stem else self.input_shape[0]
        for stage in self.stages:
            if stage.blocks:
                width = stage.blocks[-1].out_channels
        return width

    def blocks(self) -> Iterator[tuple[int, int, BlockSpec]]:
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage.blocks):
                yield si, bi, block

    def num_removable(self) -> int:
        return sum(b.removable for _, _, b in self.blocks())

    def validate(self) -> None:
        c, h, w = self.input_shape
        if min(c, h, w) <= 0 or self.num_classes <= 0:
            raise StructuralError(f"non-positive dimension in {self.input_shape} / classes={self.num_classes}")
        width = c
        if self.stem is not None:
            _check_conv(self.stem, width, "stem")
            h, w = self.stem.out_hw(h, w)
            width = self.stem.out_channels
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage.blocks):
                where = f"stage {si} block {bi}"
                _check_conv(block.conv1, width, f"{where} conv1")
                _check_conv(block.conv2, block.conv1.out_channels, f"{where} conv2")
                if block.conv2.stride != 1:
                    raise StructuralError(f"{where}: conv2 must have stride 1")
                if block.shortcut is None:
                    if block.out_channels != width or block.stride != 1:
                        raise StructuralError(f"{where}: identity shortcut needs matching shape")
                else:
                    _check_conv(block.shortcut, width, f"{where} shortcut")
                    if block.shortcut.out_channels != block.out_channels or block.shortcut.stride != block.stride:
                        raise StructuralError(f"{where}: shortcut does not match residual branch")
                    if block.shortcut.kernel != 1 or block.shortcut.padding != 0:
                        raise StructuralError(f"{where}: shortcut must be a 1x1 conv")
                if bi > 0 and not block.removable:
                    raise StructuralError(f"{where}: only the first block of a stage may project")
                hb, wb = block.conv1.out_hw(h, w)
                if block.conv2.out_hw(hb, wb) != (hb, wb):
                    raise StructuralError(f"{where}: conv2 must preserve spatial size")
                h, w = hb, wb
                width = block.out_channels
            if stage.out_channels != width:
                raise StructuralError(f"stage {si}: declared {stage.out_channels} channels, has {width}")
            if h <= 0 or w <= 0:
                raise StructuralError(f"stage {si}: spatial size collapsed to {h}x{w}")

    # -- canonical text form

    def to_dict(self) -> dict:
        def conv(c: ConvSpec | None):
            if c is None:
                return None
            return [c.in_channels, c.out_channels, c.kernel, c.stride, c.padding]

        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "stem": conv(self.stem),
            "stages": [
                {
                    "out_channels": s.out_channels,
                    "stride": s.stride,
                    "blocks": [[conv(b.conv1), conv(b.conv2), conv(b.shortcut)] for b in s.blocks],
                }
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        def conv(v):
            return None if v is None else ConvSpec(*v)

        stages = tuple(
            Stage(
                blocks=tuple(BlockSpec(conv(b[0]), conv(b[1]), conv(b[2])) for b in s["blocks"]),
                out_channels=s["out_channels"],
                stride=s["stride"],
            )
            for s in d["stages"]
        )
        stem = conv(d["stem"])
        return cls(tuple(d["input_shape"]), stages, d["num_classes"], stem)


def _check_conv(c: ConvSpec, in_width: int, where: str) -> None:
    if c.in_channels <= 0 or c.out_channels <= 0 or c.kernel <= 0 or c.stride <= 0 or c.padding < 0:
        raise StructuralError(f"{where}: invalid conv dimensions {c}")
    if c.in_channels != in_width:
        raise StructuralError(f"{where}: expects {c.in_channels} input channels, receives {in_width}")


def resnet_spec(
    widths=(8, 16, 32),
    blocks=(3, 3, 3),
    input_shape=(3, 16, 16),
    num_classes: int = 10,
) -> NetworkSpec:
    """CIFAR-style ResNet: a 3x3 stem at ``widths[0]``, then one stage per width."""
    if len(widths) != len(blocks):
        raise StructuralError("widths and blocks must have the same length")
    stem = ConvSpec(input_shape[0], widths[0])
    width = widths[0]
    stages = []
    for i, (w, n) in enumerate(zip(widths, blocks)):
        stride = 1 if i == 0 else 2
        bl = []
        for j in range(n):
            s = stride if j == 0 else 1
            short = None
            if width != w or s != 1:
                short = ConvSpec(width, w, kernel=1, stride=s, padding=0)
            bl.append(BlockSpec(ConvSpec(width, w, stride=s), ConvSpec(w, w), short))
            width = w
        stages.append(Stage(tuple(bl), w, stride))
    spec = NetworkSpec(tuple(input_shape), tuple(stages), num_classes, stem)
    spec.validate()
    return spec


def dense_spec(in_features: int, num_classes: int) -> NetworkSpec:
    """Pooling plus a dense head, fed by 1x1 "images"."""
    spec = NetworkSpec((in_features, 1, 1), (), num_classes, None)
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# parameters


def conv_names(spec: NetworkSpec) -> Iterator[tuple[str, ConvSpec]]:
    """Every conv in declaration order, keyed by its parameter prefix."""
    if spec.stem is not None:
        yield "stem", spec.stem
    for si, bi, block in spec.blocks():
        p = f"s{si}.b{bi}"
        yield f"{p}.conv1", block.conv1
        yield f"{p}.conv2", block.conv2
        if block.shortcut is not None:
            yield f"{p}.short", block.shortcut


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, c in conv_names(spec):
        shapes[f"{name}.w"] = (c.out_channels, c.in_channels, c.kernel, c.kernel)
        shapes[f"{name}.b"] = (c.out_channels,)
        shapes[f"{name}.scale"] = (c.out_channels,)
        shapes[f"{name}.shift"] = (c.out_channels,)
    shapes["head.w"] = (spec.num_classes, spec.feature_dim)
    shapes["head.b"] = (spec.num_classes,)
    return shapes


def num_parameters(spec: NetworkSpec) -> int:
    return sum(math.prod(s) for s in param_shapes(spec).values())


@dataclass
class ModelState:
    spec: NetworkSpec
    params: dict[str, torch.Tensor]
    rng_seed: int
    epoch_counter: int = 0

    def __post_init__(self):
        shapes = param_shapes(self.spec)
        if list(shapes) != list(self.params):
            raise StructuralError("parameter store does not match spec declaration order")
        for name, shape in shapes.items():
            if tuple(self.params[name].shape) != shape:
                raise StructuralError(f"{name}: shape {tuple(self.params[name].shape)} != {shape}")

    def copy(self, **changes) -> "ModelState":
        params = {k: v.clone() for k, v in self.params.items()}
        fields = dict(spec=self.spec, params=params, rng_seed=self.rng_seed, epoch_counter=self.epoch_counter)
        fields.update(changes)
        return ModelState(**fields)

    def to(self, dtype: torch.dtype) -> "ModelState":
        return self.copy(params={k: v.to(dtype) for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.detach().cpu().numpy().ravel() for v in self.params.values()])

    def equal(self, other: "ModelState") -> bool:
        return (
            self.spec == other.spec
            and all(torch.equal(self.params[k], other.params[k]) for k in self.params)
        )


def init_model(spec: NetworkSpec, seed: int) -> ModelState:
    """He-normal weights, zero biases, unit affine scales and zero shifts."""
    spec.validate()
    gen = torch.Generator().manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    params: dict[str, torch.Tensor] = {}
    for name, shape in param_shapes(spec).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "w":
            fan_in = math.prod(shape[1:])
            params[name] = torch.randn(shape, generator=gen, dtype=torch.float32) * math.sqrt(2.0 / fan_in)
        elif kind == "scale":
            params[name] = torch.ones(shape, dtype=torch.float32)
        else:
            params[name] = torch.zeros(shape, dtype=torch.float32)
    return ModelState(spec, params, int(seed))


# ---------------------------------------------------------------------------
# forward


def _conv(p: dict[str, torch.Tensor], name: str, c: ConvSpec, x: torch.Tensor) -> torch.Tensor:
    y = F.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=c.stride, padding=c.padding)
    return y * p[f"{name}.scale"][:, None, None] + p[f"{name}.shift"][:, None, None]


def _forward(spec: NetworkSpec, p: dict[str, torch.Tensor], x: torch.Tensor):
    h = x
    if spec.stem is not None:
        h = F.relu(_conv(p, "stem", spec.stem, h))
    for si, bi, block in spec.blocks():
        name = f"s{si}.b{bi}"
        r = F.relu(_conv(p, f"{name}.conv1", block.conv1, h))
        r = _conv(p, f"{name}.conv2", block.conv2, r)
        short = h if block.shortcut is None else _conv(p, f"{name}.short", block.shortcut, h)
        h = F.relu(r + short)
    rep = h.mean(dim=(2, 3))
    logits = rep @ p["head.w"].T + p["head.b"]
    return logits, rep


def _as_batch(model: ModelState, batch) -> torch.Tensor:
    x = torch.as_tensor(batch)
    dtype = next(iter(model.params.values())).dtype
    x = x.to(dtype)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.spec.input_shape):
        raise StructuralError(f"batch shape {tuple(x.shape)} does not match input {model.spec.input_shape}")
    return x


def forward(model: ModelState, batch, params: dict[str, torch.Tensor] | None = None):
    """Return ``(logits, rep)`` where ``rep`` is the globally pooled last-stage output."""
    x = _as_batch(model, batch)
    with torch.no_grad():
        return _forward(model.spec, model.params if params is None else params, x)


def loss_and_grads(model: ModelState, images, labels) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean softmax cross-entropy and its gradient w.r.t. every parameter."""
    x = _as_batch(model, images)
    y = torch.as_tensor(labels, dtype=torch.long)
    p = {k: v.detach().clone().requires_grad_(True) for k, v in model.params.items()}
    logits, _ = _forward(model.spec, p, x)
    loss = F.cross_entropy(logits, y)
    loss.backward()
    return float(loss.detach()), {k: v.grad.detach() for k, v in p.items()}


def loss_value(model: ModelState, images, labels) -> float:
    logits, _ = forward(model, images)
    return float(F.cross_entropy(logits.double(), torch.as_tensor(labels, dtype=torch.long)))


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: tuple[tuple[int, float], ...] = field(default_factory=tuple)

    def validate(self, dataset_size: int | None = None) -> None:
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("invalid optimiser hyper-parameters")
        epochs = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("lr_schedule epochs must be strictly increasing")
        if dataset_size is not None and self.batch_size > dataset_size:
            raise ValueError(f"batch_size {self.batch_size} exceeds dataset size {dataset_size}")

    def lr_at(self, epoch: int) -> float:
        mult = 1.0
        for e, m in self.lr_schedule:
            if epoch >= e:
                mult = m
        return self.learning_rate * mult


def derive_seed(*keys: int) -> int:
    """Independent 64-bit stream seed for a tuple of integer keys."""
    ss = np.random.SeedSequence([int(k) & 0xFFFF_FFFF_FFFF_FFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def train(model: ModelState, data, cfg: TrainConfig) -> ModelState:
    """Mini-batch SGD with momentum on cross-entropy; returns a new state."""
    cfg.validate(len(data))
    out = model.copy()
    if cfg.epochs == 0:
        return out
    x_all = torch.as_tensor(data.images).to(torch.float32)
    y_all = torch.as_tensor(data.labels, dtype=torch.long)
    _as_batch(out, x_all[:1])
    p = {k: v.requires_grad_(True) for k, v in out.params.items()}
    opt = torch.optim.SGD(
        list(p.values()), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    n = len(data)
    for e in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = cfg.lr_at(e)
        gen = torch.Generator().manual_seed(derive_seed(out.rng_seed, out.epoch_counter) >> 1)
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits, _ = _forward(out.spec, p, x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(out.epoch_counter)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        out.epoch_counter += 1
    out.params = {k: v.detach() for k, v in p.items()}
    for v in out.params.values():
        if not torch.isfinite(v).all():
            raise TrainingDiverged(out.epoch_counter - 1)
    return out


def predict_logits(model: ModelState, images, batch_size: int = 512) -> torch.Tensor:
    x = torch.as_tensor(images)
    return torch.cat([forward(model, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)])


def evaluate(model: ModelState, data) -> float:
    if len(data) == 0:
        raise PreconditionError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, data.images).double().numpy()
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == np.asarray(data.labels)))


def extract_representation(model: ModelState, probe):
    from .similarity import RepMatrix

    x = torch.as_tensor(probe)
    if x.shape[0] < MIN_PROBE:
        raise PreconditionError(f"probe needs at least {MIN_PROBE} examples, got {x.shape[0]}")
    reps = [forward(model, x[i : i + 512])[1] for i in range(0, len(x), 512)]
    return RepMatrix(torch.cat(reps).double().numpy())


# ---------------------------------------------------------------------------
# FLOPs


def conv_flops(c: ConvSpec, h_out: int, w_out: int) -> int:
    return 2 * c.out_channels * c.in_channels * c.kernel * c.kernel * h_out * w_out


def dense_flops(d_in: int, d_out: int) -> int:
    return 2 * d_in * d_out


def flop_terms(spec: NetworkSpec) -> dict[str, int]:
    """Per-layer closed-form FLOP terms keyed by layer name.

    conv: 2*Cout*Cin*k^2*Hout*Wout; dense: 2*din*dout; affine, ReLU, residual add and
    pooling: one FLOP per output element.
    """
    terms: dict[str, int] = {}
    _, h, w = spec.input_shape
    if spec.stem is not None:
        h, w = spec.stem.out_hw(h, w)
        el = spec.stem.out_channels * h * w
        terms["stem.conv"] = conv_flops(spec.stem, h, w)
        terms["stem.affine"] = el
        terms["stem.relu"] = el
    for si, bi, b in spec.blocks():
        p = f"s{si}.b{bi}"
        h, w = b.conv1.out_hw(h, w)
        terms[f"{p}.conv1"] = conv_flops(b.conv1, h, w)
        terms[f"{p}.affine1"] = b.conv1.out_channels * h * w
        terms[f"{p}.relu1"] = b.conv1.out_channels * h * w
        terms[f"{p}.conv2"] = conv_flops(b.conv2, h, w)
        el = b.out_channels * h * w
        terms[f"{p}.affine2"] = el
        if b.shortcut is not None:
            terms[f"{p}.short"] = conv_flops(b.shortcut, h, w)
            terms[f"{p}.short_affine"] = el
        terms[f"{p}.add"] = el
        terms[f"{p}.relu"] = el
    terms["pool"] = spec.feature_dim
    terms["head"] = dense_flops(spec.feature_dim, spec.num_classes)
    return terms


def count_flops(spec: NetworkSpec) -> int:
    return int(sum(flop_terms(spec).values()))


def block_flops(spec: NetworkSpec, stage: int, block: int) -> int:
    prefix = f"s{stage}.b{block}."
    return sum(v for k, v in flop_terms(spec).items() if k.startswith(prefix))


__all__ = [
    "ConvSpec", "BlockSpec", "Stage", "NetworkSpec", "ModelState", "TrainConfig",
    "resnet_spec", "dense_spec", "init_model", "forward", "train", "evaluate",
    "extract_representation", "count_flops", "flop_terms", "block_flops",
    "loss_and_grads", "loss_value", "param_shapes", "num_parameters", "derive_seed",
]
