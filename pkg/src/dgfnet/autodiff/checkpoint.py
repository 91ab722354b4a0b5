"""Versioned binary checkpoint container.

Layout: magic b"DGFN", format version u32, then one record per entry:
u32 name length, UTF-8 name bytes, u8 dtype tag (1=float32, 2=float64),
u32 rank, u32 extents, raw little-endian scalars in row-major order.
Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from dgfnet.errors import CheckpointFormatError

MAGIC = b"DGFN"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tag = _DTYPE_TAGS.get(np.dtype(le.dtype.str))
        if tag is None:
            raise CheckpointFormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BI", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(le.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    off = 8
    out: dict[str, np.ndarray] = {}
    try:
        while off < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BI", blob, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            dtype = _TAG_DTYPES.get(tag)
            if dtype is None:
                raise CheckpointFormatError(f"{path}: entry {name!r} has dtype tag {tag}")
            count = int(np.prod(shape)) if rank else 1
            nbytes = count * dtype.itemsize
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
            off += nbytes
            out[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as e:
        raise CheckpointFormatError(f"{path}: truncated or corrupt record: {e}") from None
    return out
