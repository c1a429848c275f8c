from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from pixmot.mot_core import ModelParams
from pixmot.numerics import RandomStream, Tensor

MAGIC = b"PXMT"
FORMAT_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
TAG_FOR_DTYPE = {np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    params: dict[str, Tensor]
    ema: dict[str, Tensor] = field(default_factory=dict)
    rng: RandomStream = field(default_factory=lambda: RandomStream(0, 0))
    step: int = 0
    version: int = FORMAT_VERSION

    def model_params(self, model_config: Any, use_ema: bool = False) -> ModelParams:
        source = self.ema if use_ema and self.ema else self.params
        return ModelParams.from_named(model_config, source)


def _encode_array(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    tag = TAG_FOR_DTYPE.get(array.dtype)
    if tag is None:
        raise CheckpointError(f"array {name} has unsupported dtype {array.dtype}")
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", tag, array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + array.astype(DTYPE_TAGS[tag]).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    arrays = [(f"params.{k}", v) for k, v in ckpt.params.items()] + [(f"ema.{k}", v) for k, v in ckpt.ema.items()]
    parts = [
        MAGIC,
        struct.pack("<I", ckpt.version),
        struct.pack("<I", len(config)),
        config,
        ckpt.rng.key.to_bytes(16, "little"),
        struct.pack("<QQ", ckpt.rng.counter, ckpt.step),
        struct.pack("<I", len(arrays)),
    ]
    parts.extend(_encode_array(name, t.detach().cpu().numpy()) for name, t in arrays)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, blob: bytes, end: int) -> None:
        self.blob = blob
        self.end = end
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > self.end:
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.blob[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a pixmot checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    reader = _Reader(blob, len(blob) - 4)
    reader.pos = 8
    (config_len,) = reader.unpack("<I", "config length")
    try:
        config = json.loads(reader.take(config_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"config echo is not valid JSON: {exc}") from exc
    key = int.from_bytes(reader.take(16, "rng key"), "little")
    counter, step = reader.unpack("<QQ", "rng counter and step")
    (count,) = reader.unpack("<I", "array count")
    arrays: dict[str, Tensor] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"array {index} name length")
        name = reader.take(name_len, f"array {index} name").decode("utf-8", errors="replace")
        tag, rank = reader.unpack("<BB", f"array {name} header")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"array {name} has unknown dtype tag {tag}")
        shape = reader.unpack(f"<{rank}Q", f"array {name} shape")
        dtype = DTYPE_TAGS[tag]
        payload = reader.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize, f"array {name} payload")
        arrays[name] = torch.from_numpy(np.frombuffer(payload, dtype=dtype).reshape(shape).copy())
    if reader.pos != reader.end:
        raise CheckpointError(f"{reader.end - reader.pos} unexpected bytes before the checksum")
    (stored,) = struct.unpack("<I", blob[-4:])
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointError(f"checksum mismatch: stored {stored:08x}, computed {actual:08x}")
    return Checkpoint(
        config=config,
        params={k[len("params.") :]: v for k, v in arrays.items() if k.startswith("params.")},
        ema={k[len("ema.") :]: v for k, v in arrays.items() if k.startswith("ema.")},
        rng=RandomStream(key, counter),
        step=step,
        version=version,
    )


def save_checkpoint(path: str | os.PathLike[str], ckpt: Checkpoint) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(ckpt)
    with tempfile.NamedTemporaryFile(dir=target.parent, delete=False) as tmp:
        tmp.write(blob)
    os.replace(tmp.name, target)
    return target


def load_checkpoint(path: str | os.PathLike[str]) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def checkpoint_from_named(
    config: Mapping[str, Any],
    params: Mapping[str, Tensor],
    ema: Mapping[str, Tensor] | None = None,
    rng: RandomStream | None = None,
    step: int = 0,
) -> Checkpoint:
    return Checkpoint(
        config=dict(config),
        params={k: v.detach().clone() for k, v in params.items()},
        ema={k: v.detach().clone() for k, v in (ema or {}).items()},
        rng=rng or RandomStream(0, 0),
        step=step,
    )
