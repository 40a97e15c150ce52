"""Checkpoint files: a JSON manifest followed by raw float64 tensors.

Layout::

    b"DANCKPT1"  u64 manifest_length  manifest (UTF-8 JSON)  payload

The manifest carries the model/optimiser configuration, the epoch counter,
the trainer RNG state and a tensor directory of ``{name, shape, offset}``
entries whose offsets index into the little-endian float64 payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import ContainerError, VersionError

MAGIC = b"DANCKPT1"
FORMAT_VERSION = 1
_U64 = struct.Struct("<Q")


class CheckpointError(ContainerError):
    pass


@dataclass
class Checkpoint:
    model: dict
    params: dict  # name -> array
    momentum: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.model["kind"]


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    tensors = [("param", n, a) for n, a in ckpt.params.items()]
    tensors += [("momentum", n, a) for n, a in ckpt.momentum.items()]
    directory, chunks, offset = [], [], 0
    for group, name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        directory.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "version": FORMAT_VERSION,
        "model": ckpt.model,
        "optimizer": ckpt.optimizer,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "tensors": directory,
        "payload_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.write_bytes(MAGIC + _U64.pack(len(head)) + head + b"".join(chunks))
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC[:7]):
        raise CheckpointError(f"{path}: not a checkpoint file")
    if data[:8] != MAGIC:
        raise VersionError(f"{path}: unsupported checkpoint version {data[:8]!r}")
    try:
        (n,) = _U64.unpack_from(data, 8)
        manifest = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path}: manifest version {manifest.get('version')}")
    payload = data[16 + n :]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {manifest['payload_bytes']}")
    groups = {"param": {}, "momentum": {}}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        groups[entry["group"]][entry["name"]] = arr.astype(np.float64).reshape(shape)
    return Checkpoint(
        model=manifest["model"],
        params=groups["param"],
        momentum=groups["momentum"],
        optimizer=manifest["optimizer"],
        epoch=manifest["epoch"],
        rng_state=manifest["rng_state"],
        extra=manifest["extra"],
    )
