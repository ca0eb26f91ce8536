"""``.prnet`` checkpoints.

Layout: magic ``PRNET1\\0``, a u32-LE length plus canonical JSON header (network spec,
rng seed, epoch counter), every parameter as little-endian float32 in declaration
order, and finally an 8-byte BLAKE2b digest of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .nn import ModelState, NetworkSpec, param_shapes

MAGIC = b"PRNET1\0"
CHECKSUM_BYTES = 8


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


def canonical_header(model: ModelState) -> bytes:
    header = {
        "network": model.spec.to_dict(),
        "rng_seed": model.rng_seed,
        "epoch_counter": model.epoch_counter,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(model: ModelState) -> bytes:
    header = canonical_header(model)
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for v in model.params.values():
        parts.append(v.detach().cpu().numpy().astype("<f4").tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def loads(raw: bytes) -> ModelState:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a PRNET1 checkpoint (bad magic)")
    body, digest = raw[:-CHECKSUM_BYTES], raw[-CHECKSUM_BYTES:]
    if len(raw) < len(MAGIC) + 4 + CHECKSUM_BYTES or _checksum(body) != digest:
        raise CheckpointError("checksum mismatch")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    try:
        header = json.loads(body[pos : pos + n].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["network"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable spec block: {exc}") from exc
    pos += n
    params = {}
    for name, shape in param_shapes(spec).items():
        size = math.prod(shape)
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos)
        params[name] = torch.from_numpy(arr.astype(np.float32).reshape(shape))
        pos += 4 * size
    if pos != len(body):
        raise CheckpointError("parameter payload length does not match spec")
    return ModelState(spec, params, int(header["rng_seed"]), int(header["epoch_counter"]))


def save(model: ModelState, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | Path) -> ModelState:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    try:
        return loads(raw)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
