"""
Binary blob I/O for dataset shards.

Responsibilities:
- Write float64 arrays as raw little-endian blobs and report shape and CRC32.
- Read blobs back, validating byte size and checksum.
"""
from __future__ import annotations

import zlib
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import CorruptDataset
from ..schemas import BlobInfo

BLOB_DTYPE = np.dtype("<f8")


def write_blob(root: Union[str, Path], relative: str, array: np.ndarray) -> BlobInfo:
    """Write `array` to root/relative and return its manifest entry."""
    payload = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
    target = Path(root) / relative
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(payload)
    return BlobInfo(file=relative, shape=list(np.shape(array)), crc32=zlib.crc32(payload))


def read_blob(root: Union[str, Path], info: BlobInfo) -> np.ndarray:
    """Load a blob described by `info`.

    Raises:
        CorruptDataset: If the file is missing, truncated or fails its checksum.
    """
    target = Path(root) / info.file
    if not target.is_file():
        raise CorruptDataset("missing blob", path=str(target))
    payload = target.read_bytes()
    expected = int(np.prod(info.shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
    if len(payload) != expected:
        raise CorruptDataset(f"blob has {len(payload)} bytes, expected {expected}", path=str(target))
    if zlib.crc32(payload) != info.crc32:
        raise CorruptDataset("checksum mismatch", path=str(target))
    return np.frombuffer(payload, dtype=BLOB_DTYPE).reshape(tuple(info.shape)).astype(np.float64)


