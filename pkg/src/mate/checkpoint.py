"""Binary weight container shared by base checkpoints ("MATE") and LoRA files ("LORA").

Layout, all little-endian: 4-byte magic, u32 version, the eight ModelConfig
fields as u32 in declaration order, then named blobs until end of file:
u32 name length, UTF-8 name, u32 rank, u32 extents, float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .conditioning import LoraAdapter, LoraParams
from .dit import DitError, ModelConfig, ModelParams, lora_targets, param_shapes
from .numerics import Tensor

MODEL_MAGIC = b"MATE"
LORA_MAGIC = b"LORA"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_CONFIG_FIELDS = 8


class CheckpointError(Exception):
    pass


def _encode(magic: bytes, config: ModelConfig, blobs: Iterable[tuple[str, Tensor]]) -> bytes:
    out = bytearray(magic)
    out += _U32.pack(FORMAT_VERSION)
    out += struct.pack(f"<{_CONFIG_FIELDS}I", *config.values())
    for name, t in blobs:
        raw = name.encode("utf-8")
        out += _U32.pack(len(raw)) + raw
        out += _U32.pack(t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def at_end(self) -> bool:
        return self.pos >= len(self.data)

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def _decode(data: bytes, magic: bytes) -> tuple[ModelConfig, dict[str, Tensor]]:
    reader = _Reader(data)
    found = reader.take(4, "magic")
    if found != magic:
        raise CheckpointError(f"bad magic {found!r}, expected {magic!r}")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    values = struct.unpack(f"<{_CONFIG_FIELDS}I", reader.take(4 * _CONFIG_FIELDS, "config"))
    try:
        config = ModelConfig(*values)
    except DitError as e:
        raise CheckpointError(f"invalid model config in checkpoint: {e}") from e

    blobs: dict[str, Tensor] = {}
    while not reader.at_end():
        name = reader.take(reader.u32("name length"), "name").decode("utf-8", errors="replace")
        rank = reader.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"extents of {name}"))
        count = int(np.prod(shape)) if rank else 1
        raw = reader.take(4 * count, f"data of {name}")
        if name in blobs:
            raise CheckpointError(f"duplicate blob {name!r}")
        blobs[name] = Tensor(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape))
    return config, blobs


def encode_model(params: ModelParams) -> bytes:
    return _encode(MODEL_MAGIC, params.config, params.items())


def decode_model(data: bytes) -> ModelParams:
    config, blobs = _decode(data, MODEL_MAGIC)
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(blobs))
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[0]!r}")
    unknown = sorted(set(blobs) - set(expected))
    if unknown:
        raise CheckpointError(f"unknown parameter {unknown[0]!r} in checkpoint")
    try:
        return ModelParams(config, blobs)
    except DitError as e:
        raise CheckpointError(str(e)) from e


def encode_lora(lora: LoraParams, config: ModelConfig) -> bytes:
    if lora.rank != config.lora_rank:
        raise CheckpointError(f"LoRA rank {lora.rank} does not match config rank {config.lora_rank}")
    return _encode(LORA_MAGIC, config, lora.named_tensors())


def decode_lora(data: bytes) -> tuple[ModelConfig, LoraParams]:
    config, blobs = _decode(data, LORA_MAGIC)
    shapes = param_shapes(config)
    adapters = {}
    for target in lora_targets(config):
        a, b = blobs.pop(f"{target}.lora_A", None), blobs.pop(f"{target}.lora_B", None)
        if a is None or b is None:
            raise CheckpointError(f"LoRA file lacks factors for {target!r}")
        adapter = LoraAdapter(A=a, B=b)
        if adapter.target_shape != shapes[target] or adapter.rank != config.lora_rank:
            raise CheckpointError(f"LoRA factors for {target!r} do not fit {shapes[target]} at rank {config.lora_rank}")
        adapters[target] = adapter
    if blobs:
        raise CheckpointError(f"unknown LoRA blob {sorted(blobs)[0]!r}")
    return config, LoraParams(rank=config.lora_rank, adapters=adapters)


def _read(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e.strerror}") from e


def _write(path: Path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise CheckpointError(f"cannot write {path}: {e.strerror}") from e


def save_model(params: ModelParams, path: Path) -> None:
    _write(path, encode_model(params))


def load_model(path: Path) -> ModelParams:
    try:
        return decode_model(_read(path))
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from e


def save_lora(lora: LoraParams, config: ModelConfig, path: Path) -> None:
    _write(path, encode_lora(lora, config))


def load_lora(path: Path, config: ModelConfig) -> LoraParams:
    """Read a LoRA file and check that it was trained against `config`."""
    try:
        found, lora = decode_lora(_read(path))
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from e
    if found != config:
        raise CheckpointError(f"{path}: LoRA was trained for {found}, model is {config}")
    return lora


__all__ = [
    "FORMAT_VERSION",
    "LORA_MAGIC",
    "MODEL_MAGIC",
    "CheckpointError",
    "decode_lora",
    "decode_model",
    "encode_lora",
    "encode_model",
    "load_lora",
    "load_model",
    "save_lora",
    "save_model",
]
