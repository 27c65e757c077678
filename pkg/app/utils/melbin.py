"""Little-endian mel container.

Layout: 4-byte magic ``MELB``, then uint32 version, uint32 D, uint32 T, then
D * T float32 values in row-major (bin-major) order.
"""

import struct
from pathlib import Path

import numpy as np

from app.core.errors import InvalidInputError

MAGIC = b"MELB"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_melbin(path: Path, values: np.ndarray):
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise InvalidInputError(f"mel container holds a 2-D matrix, got shape {values.shape}")
    n_mels, n_frames = values.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n_mels, n_frames))
        fh.write(np.ascontiguousarray(values).tobytes(order="C"))


def read_melbin(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Mel container not found: '{path}'")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"'{path}' is too short to be a mel container")
    magic, version, n_mels, n_frames = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidInputError(f"'{path}' is not a mel container")
    if version != VERSION:
        raise InvalidInputError(f"'{path}' has unsupported container version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != n_mels * n_frames:
        raise InvalidInputError(f"'{path}' holds {body.size} values, header says {n_mels} x {n_frames}")
    return body.reshape(n_mels, n_frames).astype(np.float32)
