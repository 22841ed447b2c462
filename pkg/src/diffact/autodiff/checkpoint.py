"""Binary checkpoint container ("DACT" format).

Layout, all integers little-endian::

    b"DACT"  u32 version
    payload:
        u32 header_len, header_len bytes of UTF-8 JSON
        u32 record_count
        record_count x ( u16 name_len, name,
                         u8 dtype_len, dtype (numpy str, e.g. "<f4"),
                         u8 ndim, ndim x u64 dims,
                         u64 nbytes, raw little-endian data )
    u32 CRC32(payload)
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"DACT"
FORMAT_VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    parts = []
    hdr = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(hdr)))
    parts.append(hdr)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        nb = name.encode("utf-8")
        dt = arr.dtype.str.encode("ascii")
        raw = np.ascontiguousarray(arr).tobytes()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", len(dt)) + dt)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<Q", len(raw)) + raw)
    payload = b"".join(parts)
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataError("not a DACT checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    payload = blob[8:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise DataError("checkpoint CRC mismatch")
    try:
        off = 0
        (hlen,) = struct.unpack_from("<I", payload, off)
        off += 4
        header = json.loads(payload[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", payload, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + nlen].decode("utf-8")
            off += nlen
            (dlen,) = struct.unpack_from("<B", payload, off)
            off += 1
            dtype = np.dtype(payload[off:off + dlen].decode("ascii"))
            off += dlen
            (ndim,) = struct.unpack_from("<B", payload, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", payload, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", payload, off)
            off += 8
            arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
            tensors[name] = arr.reshape(shape).copy()
            off += nbytes
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"truncated or malformed checkpoint: {exc}") from exc
    if off != len(payload):
        raise DataError("trailing bytes in checkpoint payload")
    return header, tensors


def save_checkpoint(path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, header))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
