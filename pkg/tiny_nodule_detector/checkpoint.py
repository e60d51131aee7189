"""
The MSDT checkpoint container.

    "MSDT" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 payload

All integers and floats are little-endian.
"""
import logging
import os
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from . import app_settings
from .exceptions import CheckpointFormatError
from .nn import Module

logger = logging.getLogger(__name__)

MAGIC = b"MSDT"


def dumps(state: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", app_settings.CHECKPOINT_VERSION, len(state))]
    for name, value in state.items():
        array = np.asarray(value)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or array.ndim > 0xFF:
            raise CheckpointFormatError(f"Tensor {name!r} cannot be stored (name or rank too long)")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.astype("<f4").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(data)
    offset = 0

    def take(count: int) -> memoryview:
        nonlocal offset
        if offset + count > len(view):
            raise CheckpointFormatError(f"Truncated checkpoint: need {count} bytes at offset {offset}")
        chunk = view[offset : offset + count]
        offset += count
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError("Not an MSDT checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != app_settings.CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(length)).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"Tensor name at offset {offset - length} is not UTF-8") from None
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float64)
    if offset != len(view):
        raise CheckpointFormatError(f"{len(view) - offset} trailing bytes after {count} tensors")
    return state


def save_checkpoint(path: Union[str, Path], model: Module):
    """Write atomically, so an interrupted save leaves the previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model.state_dict()))
    os.replace(tmp, path)
    logger.debug(f"Saved checkpoint {path}")


def load_checkpoint(path: Union[str, Path], model: Module) -> Module:
    model.load_state_dict(loads(Path(path).read_bytes()))
    return model
