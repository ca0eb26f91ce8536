"""Importance criteria for prunable structures.

``kl`` ablates a structure in place and measures how far the softmax output moves
away from the intact network's; ``l1`` sums absolute filter weights. Lower scores mean
less important, so ranking is ascending.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

from .errors import ValidationError
from .nn import ModelState, forward
from .structures import (
    DEFAULT_GROUP_SIZE,
    FilterGroup,
    LayerBlock,
    StructureId,
    check_structure,
    filter_structures,
    layer_structures,
    remove_block,
    stream_members,
    zeroed_params,
)

PROB_FLOOR = 1e-12

Criterion = Literal["kl", "l1"]
Kind = Literal["layer", "filter"]


@dataclass(frozen=True)
class CriterionScore:
    structure: StructureId
    score: float
    criterion_tag: str


def softmax64(logits) -> np.ndarray:
    z = torch.as_tensor(logits, dtype=torch.float64)
    return torch.softmax(z, dim=-1).numpy()


def kl_divergence(p, q) -> np.ndarray:
    """Row-wise KL(p || q) with both distributions floored at 1e-12."""
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    return np.sum(p * np.log(p / q), axis=-1)


def _logits(model: ModelState, probe, params=None) -> torch.Tensor:
    x = torch.as_tensor(probe)
    return torch.cat([forward(model, x[i : i + 512], params)[0] for i in range(0, len(x), 512)])


def ablated_logits(parent: ModelState, s: StructureId, probe) -> torch.Tensor:
    if isinstance(s, LayerBlock):
        return _logits(remove_block(parent, s), probe)
    return _logits(parent, probe, zeroed_params(parent, s))


def kl_score(parent: ModelState, s: StructureId, probe, parent_probs: np.ndarray | None = None) -> CriterionScore:
    """Mean over the probe of KL(softmax(parent) || softmax(parent with ``s`` ablated))."""
    check_structure(parent.spec, s)
    if len(probe) == 0:
        raise ValidationError("KL scoring needs a non-empty probe")
    if parent_probs is None:
        parent_probs = softmax64(_logits(parent, probe))
    q = softmax64(ablated_logits(parent, s, probe))
    # rounding can leave KL(p || p) a hair below zero
    return CriterionScore(s, max(float(np.mean(kl_divergence(parent_probs, q))), 0.0), "kl")


def _filter_l1(model: ModelState, name: str, channels) -> float:
    w = model.params[f"{name}.w"].double()
    return float(w[list(channels)].abs().sum())


def l1_score(parent: ModelState, s: StructureId) -> CriterionScore:
    """Sum of |w| over the addressed filters.

    For a block this is the sum over all of its filters; filter norms are a weak
    proxy for layer importance, so treat block scores as a heuristic.
    """
    block = check_structure(parent.spec, s)
    name = f"s{s.stage}.b{s.block}"
    if isinstance(s, LayerBlock):
        total = _filter_l1(parent, f"{name}.conv1", range(block.conv1.out_channels))
        total += _filter_l1(parent, f"{name}.conv2", range(block.conv2.out_channels))
        return CriterionScore(s, total, "l1")
    if s.conv == 1:
        return CriterionScore(s, _filter_l1(parent, f"{name}.conv1", s.channels), "l1")
    total = _filter_l1(parent, f"{name}.conv2", s.channels) + _filter_l1(parent, f"{name}.short", s.channels)
    members, _ = stream_members(parent.spec, s.stage, s.block)
    for si, bi in members:
        total += _filter_l1(parent, f"s{si}.b{bi}.conv2", s.channels)
    return CriterionScore(s, total, "l1")


def candidates_of(parent: ModelState, kind: Kind, group_size: int = DEFAULT_GROUP_SIZE) -> list[StructureId]:
    if kind == "layer":
        return list(layer_structures(parent.spec))
    if kind == "filter":
        return list(filter_structures(parent.spec, group_size))
    raise ValidationError(f"unknown structure kind {kind!r}")


def rank_structures(
    parent: ModelState,
    kind: Kind,
    criterion: Criterion = "kl",
    probe=None,
    group_size: int = DEFAULT_GROUP_SIZE,
) -> list[CriterionScore]:
    """All structures of ``kind`` ordered by ascending score, ties by index.

    An empty list signals that no structure of that kind is left.
    """
    structures = candidates_of(parent, kind, group_size)
    if criterion == "kl":
        if probe is None:
            raise ValidationError("the KL criterion needs a probe set")
        parent_probs = softmax64(_logits(parent, probe))
        scores = [kl_score(parent, s, probe, parent_probs) for s in structures]
    elif criterion == "l1":
        scores = [l1_score(parent, s) for s in structures]
    else:
        raise ValidationError(f"unknown criterion {criterion!r}")
    return sorted(scores, key=lambda c: (c.score, c.structure.key()))
