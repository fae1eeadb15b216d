"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"ACDC" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype code | u8 rank
                | u32 dim * rank | raw payload
    u32 CRC32 of every preceding byte

dtype code 0 is float32.  Code 1 (uint8) carries the JSON metadata blob
stored under the name ``meta``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CheckpointMismatchError, CheckpointVersionError

MAGIC = b"ACDC"
VERSION = 1
META_KEY = "meta"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def model_config(self) -> dict:
        return self.meta.get("model_config", {})

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def encode(ckpt: Checkpoint) -> bytes:
    items = list(ckpt.tensors.items())
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    items.append((META_KEY, np.frombuffer(meta, dtype=np.uint8)))
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            arr = arr.astype(np.float32)
            code = 0
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic bytes)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("checkpoint CRC mismatch (file truncated or corrupted)")
    pos, tensors, meta = 12, {}, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise CheckpointFormatError(f"payload of '{name}' is truncated")
            arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
            pos += nbytes
            if name == META_KEY:
                meta = json.loads(arr.tobytes().decode("utf-8"))
            else:
                tensors[name] = arr.astype(np.float32)
    except (struct.error, KeyError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointFormatError("trailing bytes after the last tensor")
    return Checkpoint(tensors, meta, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return decode(path.read_bytes())


def model_state(model) -> dict[str, np.ndarray]:
    state = {f"param/{n}": p.data for n, p in model.named_parameters()}
    state.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    return state


def load_model_state(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy ``param/*`` and ``buffer/*`` tensors into ``model`` in place.

    Everything is validated before anything is written.
    """
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {f"param/{n}": p.shape for n, p in params.items()}
    expected.update({f"buffer/{n}": b.shape for n, b in buffers.items()})
    present = {k: v for k, v in tensors.items() if k.startswith(("param/", "buffer/"))}
    missing = sorted(set(expected) - set(present))
    extra = sorted(set(present) - set(expected))
    if missing or extra:
        raise CheckpointMismatchError(f"tensor names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    bad = [k for k, shape in expected.items() if present[k].shape != shape]
    if bad:
        raise CheckpointMismatchError(f"shape mismatch for {bad[:5]}")
    for name, p in params.items():
        p.data = np.array(present[f"param/{name}"], dtype=p.data.dtype)
    for name, b in buffers.items():
        b[...] = present[f"buffer/{name}"]
