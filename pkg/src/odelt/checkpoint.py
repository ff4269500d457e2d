"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic       4 bytes  b"ODLT"
    version     u32
    header_len  u32      byte length of the JSON config block
    config      header_len bytes of UTF-8 JSON
    count       u32      number of tensors
    directory   count x (u16 name_len, name, u8 dtype, u8 rank, rank x u64 dims, u64 offset)
    payload     raw little-endian IEEE-754 tensors, params then EMA params

Offsets are absolute file positions. The whole directory is validated before
any tensor is materialized, so a bad file never yields a partial load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch
from torch import Tensor

from .data import DatasetSpec
from .netcore import LengthField, NetConfig

if TYPE_CHECKING:
    from .train import TrainConfig

MAGIC = b"ODLT"
VERSION = 1
_DTYPES = {1: (torch.float32, "<f4"), 2: (torch.float64, "<f8")}
_TAGS = {torch.float32: 1, torch.float64: 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net_config: NetConfig
    train_config: "TrainConfig"
    iterations: int
    params: dict[str, Tensor]
    ema: dict[str, Tensor]
    data_spec: DatasetSpec | None = None
    # in-memory training history; not serialized
    history: dict = field(default_factory=dict, repr=False)

    def config_dict(self) -> dict:
        return {
            "net": asdict(self.net_config),
            "train": self.train_config.to_dict(),
            "data": asdict(self.data_spec) if self.data_spec is not None else None,
            "iterations": self.iterations,
        }

    def build_model(self, use_ema: bool = True) -> LengthField:
        weights = self.ema if use_ema else self.params
        dtype = next(iter(weights.values())).dtype
        model = LengthField(self.net_config).to(dtype)
        model.load_state_dict(weights)
        model.eval()
        return model

    def digest(self) -> str:
        """Short content hash over config and parameter bytes."""
        h = hashlib.sha256(json.dumps(self.config_dict(), sort_keys=True).encode())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].numpy().tobytes())
        return h.hexdigest()[:12]


def save(ckpt: Checkpoint, path: str | Path) -> None:
    header = json.dumps(ckpt.config_dict(), sort_keys=True).encode("utf-8")
    tensors = [(f"params/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"ema/{k}", v) for k, v in ckpt.ema.items()]

    entries = []
    for name, t in tensors:
        if t.dtype not in _TAGS:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        entries.append((name.encode("utf-8"), _TAGS[t.dtype], tuple(t.shape)))
    dir_size = 4 + sum(2 + len(n) + 2 + 8 * len(s) + 8 for n, _, s in entries)
    offset = 12 + len(header) + dir_size

    directory = bytearray(struct.pack("<I", len(entries)))
    blobs = []
    for (name, tag, shape), (_, t) in zip(entries, tensors):
        blob = t.detach().cpu().contiguous().numpy().astype(_DTYPES[tag][1], copy=False).tobytes()
        directory += struct.pack("<H", len(name)) + name + struct.pack("<BB", tag, len(shape))
        directory += struct.pack(f"<{len(shape)}Q", *shape) + struct.pack("<Q", offset)
        offset += len(blob)
        blobs.append(blob)

    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header + bytes(directory))
        for b in blobs:
            fh.write(b)


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError("truncated checkpoint header")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint header")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def load(path: str | Path) -> Checkpoint:
    from .train import TrainConfig

    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not an ODLT checkpoint")
    rd = _Reader(buf, 4)
    version, header_len = rd.take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        cfg = json.loads(rd.raw(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt config block: {err}") from err

    (count,) = rd.take("<I")
    directory = []
    for _ in range(count):
        (name_len,) = rd.take("<H")
        name = rd.raw(name_len).decode("utf-8")
        tag, rank = rd.take("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        dims = rd.take(f"<{rank}Q") if rank else ()
        (offset,) = rd.take("<Q")
        nbytes = int(np.prod(dims, dtype=np.int64)) * np.dtype(_DTYPES[tag][1]).itemsize
        directory.append((name, tag, dims, offset, nbytes))

    payload_start = rd.pos
    spans = sorted((off, off + nb, name) for name, _, _, off, nb in directory)
    prev_end = payload_start
    for lo, hi, name in spans:
        if lo < payload_start or hi > len(buf):
            raise CheckpointError(f"tensor {name} at [{lo}, {hi}) is out of bounds (file has {len(buf)} bytes)")
        if lo < prev_end:
            raise CheckpointError(f"tensor {name} overlaps a previous tensor")
        prev_end = hi

    params, ema = {}, {}
    for name, tag, dims, offset, nbytes in directory:
        dtype, np_dtype = _DTYPES[tag]
        arr = np.frombuffer(buf, dtype=np_dtype, count=nbytes // np.dtype(np_dtype).itemsize, offset=offset)
        t = torch.from_numpy(arr.reshape(dims).astype(np_dtype[1:], copy=True))
        kind, _, key = name.partition("/")
        if kind == "params":
            params[key] = t
        elif kind == "ema":
            ema[key] = t
        else:
            raise CheckpointError(f"unexpected tensor name {name}")

    try:
        net = NetConfig(**cfg["net"])
        train = TrainConfig.from_dict(cfg["train"])
        data = DatasetSpec(**cfg["data"]) if cfg.get("data") else None
        iterations = int(cfg["iterations"])
    except (KeyError, TypeError) as err:
        raise CheckpointError(f"incomplete config block: {err}") from err
    return Checkpoint(net_config=net, train_config=train, iterations=iterations, params=params, ema=ema, data_spec=data)
