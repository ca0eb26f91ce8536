"""Addressable prunable structures and the parameter surgery that removes them.

Two filter sites exist. ``conv=1`` addresses interior channels of a block's first
conv (consumed only by that block's second conv). ``conv=2`` on a projection block
addresses channels of the residual stream it opens: the stream runs through every
identity block that follows until the next projection block (or the head), so its
channels are removed from all of them together and from the downstream consumer.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import torch

from .errors import ValidationError
from .nn import BlockSpec, ConvSpec, ModelState, NetworkSpec, param_shapes

DEFAULT_GROUP_SIZE = 4


@dataclass(frozen=True, order=True)
class LayerBlock:
    stage: int
    block: int

    def key(self) -> tuple:
        return (self.stage, self.block, 0, 0)

    def label(self) -> str:
        return f"block s{self.stage}.b{self.block}"


@dataclass(frozen=True, order=True)
class FilterGroup:
    stage: int
    block: int
    conv: int
    channels: tuple[int, ...]

    def key(self) -> tuple:
        return (self.stage, self.block, self.conv, self.channels[0])

    def label(self) -> str:
        lo, hi = self.channels[0], self.channels[-1]
        return f"filters s{self.stage}.b{self.block}.conv{self.conv}[{lo}..{hi}]"


StructureId = LayerBlock | FilterGroup


def structure_to_dict(s: StructureId) -> dict:
    if isinstance(s, LayerBlock):
        return {"kind": "layer", "stage": s.stage, "block": s.block}
    return {"kind": "filter", "stage": s.stage, "block": s.block, "conv": s.conv, "channels": list(s.channels)}


def structure_from_dict(d: dict) -> StructureId:
    if d["kind"] == "layer":
        return LayerBlock(d["stage"], d["block"])
    return FilterGroup(d["stage"], d["block"], d["conv"], tuple(d["channels"]))


# ---------------------------------------------------------------------------
# enumeration


def layer_structures(spec: NetworkSpec) -> list[LayerBlock]:
    return [LayerBlock(si, bi) for si, bi, b in spec.blocks() if b.removable]


def _chunks(n: int, g: int) -> Iterator[tuple[int, ...]]:
    for start in range(0, n, g):
        ch = tuple(range(start, min(start + g, n)))
        if len(ch) < n:
            yield ch


def filter_structures(spec: NetworkSpec, group_size: int = DEFAULT_GROUP_SIZE) -> list[FilterGroup]:
    """Contiguous channel groups at every legal filter site, in index order."""
    out = []
    for si, bi, b in spec.blocks():
        out.extend(FilterGroup(si, bi, 1, ch) for ch in _chunks(b.conv1.out_channels, group_size))
        if not b.removable:
            out.extend(FilterGroup(si, bi, 2, ch) for ch in _chunks(b.conv2.out_channels, group_size))
    return out


def check_structure(spec: NetworkSpec, s: StructureId) -> BlockSpec:
    try:
        block = spec.stages[s.stage].blocks[s.block]
    except (IndexError, TypeError):
        raise ValidationError(f"{s}: no such block") from None
    if isinstance(s, LayerBlock):
        if not block.removable:
            raise ValidationError(f"{s.label()}: projection blocks cannot be removed")
        return block
    if s.conv == 1:
        width = block.conv1.out_channels
    elif s.conv == 2:
        if block.removable:
            raise ValidationError(f"{s.label()}: conv2 of an identity block feeds the shortcut sum")
        width = block.conv2.out_channels
    else:
        raise ValidationError(f"{s}: conv index must be 1 or 2")
    ch = s.channels
    if not ch or list(ch) != sorted(set(ch)) or ch[0] < 0 or ch[-1] >= width:
        raise ValidationError(f"{s.label()}: channels must be distinct, sorted and < {width}")
    if len(ch) >= width:
        raise ValidationError(f"{s.label()}: would remove every channel")
    return block


def stream_members(spec: NetworkSpec, stage: int, block: int):
    """Blocks sharing the residual stream opened by projection block (stage, block).

    Returns ``(members, consumer)``: the identity blocks riding the stream and the
    next projection block (or ``None`` for the classifier head).
    """
    flat = list(spec.blocks())
    start = next(i for i, (si, bi, _) in enumerate(flat) if (si, bi) == (stage, block))
    members = []
    for si, bi, b in flat[start + 1 :]:
        if not b.removable:
            return members, (si, bi)
        members.append((si, bi))
    return members, None


# ---------------------------------------------------------------------------
# zero ablation (scoring)


def _zero_out(p: dict[str, torch.Tensor], conv: str, ch: list[int]) -> None:
    for suffix in ("w", "b", "scale", "shift"):
        t = p[f"{conv}.{suffix}"].clone()
        t[ch] = 0
        p[f"{conv}.{suffix}"] = t


def zeroed_params(model: ModelState, s: FilterGroup) -> dict[str, torch.Tensor]:
    """Parameter store with the group's output channels silenced (shapes unchanged)."""
    check_structure(model.spec, s)
    p = dict(model.params)
    ch = list(s.channels)
    name = f"s{s.stage}.b{s.block}"
    if s.conv == 1:
        _zero_out(p, f"{name}.conv1", ch)
        return p
    _zero_out(p, f"{name}.conv2", ch)
    _zero_out(p, f"{name}.short", ch)
    members, _ = stream_members(model.spec, s.stage, s.block)
    for si, bi in members:
        _zero_out(p, f"s{si}.b{bi}.conv2", ch)
    return p


def zero_filters(model: ModelState, s: FilterGroup) -> ModelState:
    return model.copy(params={k: v.clone() for k, v in zeroed_params(model, s).items()})


# ---------------------------------------------------------------------------
# structural removal


def _rebuild(model: ModelState, spec: NetworkSpec, renames: dict[str, str], edits) -> ModelState:
    """Create the child state: carry over tensors by (possibly renamed) key, then apply edits."""
    spec.validate()
    params = {}
    source = {renames.get(k, k): v for k, v in model.params.items()}
    for name in param_shapes(spec):
        params[name] = source[name].clone()
    for name, fn in edits:
        params[name] = fn(params[name])
    return ModelState(spec, params, model.rng_seed, model.epoch_counter)


def remove_block(model: ModelState, s: LayerBlock) -> ModelState:
    """Delete a removable block; its input flows straight on through the shortcut."""
    spec = model.spec
    check_structure(spec, s)
    stage = spec.stages[s.stage]
    blocks = stage.blocks[: s.block] + stage.blocks[s.block + 1 :]
    stages = list(spec.stages)
    stages[s.stage] = replace(stage, blocks=blocks)
    child_spec = replace(spec, stages=tuple(stages))
    renames = {}
    dropped = f"s{s.stage}.b{s.block}."
    for k in model.params:
        if k.startswith(dropped):
            renames[k] = "__removed__." + k
        elif k.startswith(f"s{s.stage}.b"):
            bi = int(k.split(".")[1][1:])
            if bi > s.block:
                rest = k.split(".", 2)[2]
                renames[k] = f"s{s.stage}.b{bi - 1}.{rest}"
    return _rebuild(model, child_spec, renames, [])


def _keep(width: int, removed) -> torch.Tensor:
    drop = set(removed)
    return torch.tensor([c for c in range(width) if c not in drop], dtype=torch.long)


def _with_out(c: ConvSpec, n: int) -> ConvSpec:
    return replace(c, out_channels=n)


def _with_in(c: ConvSpec, n: int) -> ConvSpec:
    return replace(c, in_channels=n)


def remove_filters(model: ModelState, s: FilterGroup) -> ModelState:
    """Delete output channels and the matching input slices of every consumer."""
    spec = model.spec
    block = check_structure(spec, s)
    name = f"s{s.stage}.b{s.block}"
    edits = []

    def out_rows(conv):
        return [(f"{conv}.{k}", lambda t: t[keep]) for k in ("w", "b", "scale", "shift")]

    def in_cols(conv):
        return [(f"{conv}.w", lambda t: t[:, keep])]

    stages = [list(st.blocks) for st in spec.stages]
    widths = [st.out_channels for st in spec.stages]

    if s.conv == 1:
        width = block.conv1.out_channels
        keep = _keep(width, s.channels)
        n = len(keep)
        stages[s.stage][s.block] = replace(block, conv1=_with_out(block.conv1, n), conv2=_with_in(block.conv2, n))
        edits += out_rows(f"{name}.conv1") + in_cols(f"{name}.conv2")
    else:
        width = block.conv2.out_channels
        keep = _keep(width, s.channels)
        n = len(keep)
        stages[s.stage][s.block] = replace(
            block, conv2=_with_out(block.conv2, n), shortcut=_with_out(block.shortcut, n)
        )
        edits += out_rows(f"{name}.conv2") + out_rows(f"{name}.short")
        members, consumer = stream_members(spec, s.stage, s.block)
        touched = {s.stage}
        for si, bi in members:
            b = stages[si][bi]
            stages[si][bi] = replace(b, conv1=_with_in(b.conv1, n), conv2=_with_out(b.conv2, n))
            edits += in_cols(f"s{si}.b{bi}.conv1") + out_rows(f"s{si}.b{bi}.conv2")
            touched.add(si)
        last = consumer[0] if consumer else len(spec.stages)
        # stages between the projection and the consumer carry the narrowed stream
        for si in range(s.stage, last):
            touched.add(si)
        for si in touched:
            widths[si] = n
        if consumer is None:
            edits += in_cols("head")
        else:
            ci, cb = consumer
            b = stages[ci][cb]
            stages[ci][cb] = replace(b, conv1=_with_in(b.conv1, n), shortcut=_with_in(b.shortcut, n))
            edits += in_cols(f"s{ci}.b{cb}.conv1") + in_cols(f"s{ci}.b{cb}.short")
    child_spec = replace(
        spec,
        stages=tuple(replace(st, blocks=tuple(bl), out_channels=w) for st, bl, w in zip(spec.stages, stages, widths)),
    )
    return _rebuild(model, child_spec, {}, edits)


def apply_removal(model: ModelState, s: StructureId) -> ModelState:
    if isinstance(s, LayerBlock):
        return remove_block(model, s)
    return remove_filters(model, s)
