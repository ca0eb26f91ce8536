"""Capacity-matched generation of the layer-pruned and filter-pruned candidates."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

from .criteria import Criterion, rank_structures
from .nn import ModelState, count_flops
from .structures import (  # noqa: F401  re-exported surgery surface
    DEFAULT_GROUP_SIZE,
    FilterGroup,
    LayerBlock,
    StructureId,
    apply_removal,
    remove_block,
    remove_filters,
    zero_filters,
)

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.1


@dataclass
class Subnetwork:
    model: ModelState
    removed: list[StructureId]
    flops_before: int
    flops_after: int
    kind: Literal["layer", "filter"]

    @property
    def flop_delta(self) -> int:
        return self.flops_before - self.flops_after


@dataclass
class Candidates:
    layer: Subnetwork | None
    filter: Subnetwork | None
    target_delta: int | None
    layer_exhausted: bool = False
    filter_exhausted: bool = False
    notes: list[str] = field(default_factory=list)


def make_layer_candidate(parent: ModelState, criterion: Criterion, probe) -> Subnetwork | None:
    ranked = rank_structures(parent, "layer", criterion, probe)
    if not ranked:
        return None
    child = remove_block(parent, ranked[0].structure)
    return Subnetwork(child, [ranked[0].structure], count_flops(parent.spec), count_flops(child.spec), "layer")


def make_filter_candidate(
    parent: ModelState,
    target_delta: int,
    criterion: Criterion,
    probe,
    group_size: int = DEFAULT_GROUP_SIZE,
    tau: float = DEFAULT_TAU,
) -> Subnetwork | None:
    """Greedily strip the cheapest filter groups until the FLOP saving reaches the band.

    Groups are re-ranked after every removal. A group is taken only if the running
    saving stays within ``(1 + tau) * target_delta``; ``None`` means the band
    ``[(1 - tau), (1 + tau)] * target_delta`` cannot be reached.
    Recorded channel indices refer to the network as it was when each group was cut.
    """
    lo, hi = (1 - tau) * target_delta, (1 + tau) * target_delta
    f0 = count_flops(parent.spec)
    current, removed, delta = parent, [], 0
    while delta < lo:
        nxt = None
        for cs in rank_structures(current, "filter", criterion, probe, group_size):
            child = remove_filters(current, cs.structure)
            if f0 - count_flops(child.spec) <= hi:
                nxt = (child, cs.structure)
                break
        if nxt is None:
            return None
        current, s = nxt
        removed.append(s)
        delta = f0 - count_flops(current.spec)
    return Subnetwork(current, removed, f0, f0 - delta, "filter")


def first_group_delta(parent: ModelState, criterion: Criterion, probe, group_size: int) -> int | None:
    ranked = rank_structures(parent, "filter", criterion, probe, group_size)
    if not ranked:
        return None
    child = remove_filters(parent, ranked[0].structure)
    return count_flops(parent.spec) - count_flops(child.spec)


def make_candidates(
    parent: ModelState,
    criterion: Criterion = "kl",
    probe=None,
    group_size: int = DEFAULT_GROUP_SIZE,
    tau: float = DEFAULT_TAU,
    flop_quantum: int | None = None,
) -> Candidates:
    """Build both candidates from ``parent`` with the same criterion.

    The layer candidate drops the least important removable block and fixes the FLOP
    target; without removable blocks the target is ``flop_quantum`` or, failing that,
    the saving of the single least important filter group.
    """
    layer = make_layer_candidate(parent, criterion, probe)
    out = Candidates(layer, None, None, layer_exhausted=layer is None)
    if layer is not None:
        target = layer.flop_delta
    elif flop_quantum is not None:
        target = flop_quantum
    else:
        target = first_group_delta(parent, criterion, probe, group_size)
    out.target_delta = target
    if target is not None:
        out.filter = make_filter_candidate(parent, target, criterion, probe, group_size, tau)
    if out.filter is None:
        out.filter_exhausted = True
        msg = f"filter-exhausted: no filter candidate within +/-{tau:.0%} of {target} FLOPs"
        out.notes.append(msg)
        log.info(msg)
    return out
