"""Checkpoint container: JSON header followed by raw little-endian f32 tensors.

Layout::

    magic "ADUC" | version u32 = 1 | header_len u32 | header (UTF-8 JSON)
    payload: tensors concatenated in header order, each f32 little-endian, C order

The header carries ``arch``, ``config``, ``iteration``, ``final_loss``,
``seed``, ``history`` and a ``tensors`` index of ``{name, shape, offset}``.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np
import torch

from .errors import FormatError, MissingArtifactError, StorageError

MAGIC = b"ADUC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass(eq=False)
class ModelCheckpoint:
    arch: str
    config: dict
    weights: "OrderedDict[str, np.ndarray]"
    iteration: int = 0
    final_loss: float = float("nan")
    seed: int = 0
    history: Dict[str, list] = field(default_factory=dict)

    @classmethod
    def from_module(cls, arch: str, config: dict, module: torch.nn.Module, **kw) -> "ModelCheckpoint":
        weights = OrderedDict(
            (k, v.detach().cpu().to(torch.float32).numpy().copy()) for k, v in module.state_dict().items()
        )
        return cls(arch, config, weights, **kw)

    def load_into(self, module: torch.nn.Module) -> torch.nn.Module:
        state = module.state_dict()
        missing = set(state) - set(self.weights)
        unexpected = set(self.weights) - set(state)
        if missing or unexpected:
            raise FormatError(f"checkpoint/model mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        module.load_state_dict(
            OrderedDict((k, torch.from_numpy(v.copy()).to(state[k].dtype)) for k, v in self.weights.items())
        )
        return module

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in ckpt.weights.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "arch": ckpt.arch,
        "config": ckpt.config,
        "iteration": int(ckpt.iteration),
        "final_loss": float(ckpt.final_loss),
        "seed": int(ckpt.seed),
        "history": ckpt.history,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(buf: bytes) -> ModelCheckpoint:
    if len(buf) < _PREFIX.size:
        raise FormatError("checkpoint truncated")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    base = _PREFIX.size + hlen
    weights = OrderedDict()
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        start = base + t["offset"]
        if start + 4 * n > len(buf):
            raise FormatError(f"payload length too short for tensor {t['name']}")
        weights[t["name"]] = np.frombuffer(buf, "<f4", n, start).reshape(t["shape"]).astype(np.float32)
    return ModelCheckpoint(
        arch=header["arch"], config=header["config"], weights=weights,
        iteration=header["iteration"], final_loss=header["final_loss"],
        seed=header["seed"], history=header.get("history", {}),
    )


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(to_bytes(ckpt))
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
