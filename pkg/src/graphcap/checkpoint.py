"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GCAP"                 magic
    u32  version            currently 1
    u32  tensor count
    per tensor:
      u32  name length, then the UTF-8 name
      u8   dtype tag        0 = float64, 1 = float32
      u32  rank
      u64  dims[rank]
      raw row-major payload

Optimizer state is stored next to the model under the ``adam/`` prefix:
``adam/step`` (a rank-0 float64) and ``adam/m/<name>``, ``adam/v/<name>``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"GCAP"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CorruptionError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(view[:4]) != MAGIC:
        if len(view) < 4:
            raise CorruptionError("checkpoint truncated before the magic bytes")
        raise FormatError(f"bad magic {bytes(view[:4])!r}; not a graphcap checkpoint")
    pos = 4
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(size * dtype.itemsize)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    if pos != len(view):
        raise CorruptionError(f"{len(view) - pos} trailing bytes after the last tensor")
    return out


def write_tensors(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def save_checkpoint(path: Union[str, Path], model, adam_state=None) -> None:
    tensors = {name: t.data for name, t in model.parameters().items()}
    tensors.update(model.buffers())
    if adam_state is not None:
        tensors.update(adam_state.to_tensors())
    write_tensors(path, tensors)


def load_checkpoint(path: Union[str, Path], gat_dropout: float = 0.25, decoder_dropout: float = 0.5):
    """Return ``(model, adam_state)``; the optimizer state is ``None`` if absent."""
    from .model import model_from_tensors
    from .training import AdamState

    tensors = read_tensors(path)
    model_part = {k: v for k, v in tensors.items() if not k.startswith("adam/")}
    model = model_from_tensors(model_part, gat_dropout, decoder_dropout)
    state: Optional[AdamState] = None
    if "adam/step" in tensors:
        state = AdamState.from_tensors(tensors)
    return model, state


__all__ = ["MAGIC", "VERSION", "encode_tensors", "decode_tensors", "read_tensors", "write_tensors",
           "save_checkpoint", "load_checkpoint"]
