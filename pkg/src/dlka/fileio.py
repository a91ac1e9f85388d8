"""Binary file formats: DLKV rasters and DLKC checkpoints.

Both are little-endian, magic-plus-version headers over row-major payloads,
chosen over text serialization so 64-bit floats round-trip bit-exactly.
Readers validate sizes precisely and reject truncation and trailing garbage.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import ValidationError

RASTER_MAGIC = b"DLKV"
CHECKPOINT_MAGIC = b"DLKC"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "u1": 2}


class FileFormatError(ValidationError):
    """Raised for malformed, truncated, or oversized binary files."""


def _dtype_code(arr: np.ndarray) -> int:
    kind = np.dtype(arr.dtype).newbyteorder("<").str.lstrip("<|=")
    if kind not in _CODE_FOR_KIND:
        raise FileFormatError(f"unsupported dtype {arr.dtype}")
    return _CODE_FOR_KIND[kind]


def _check_u32(value: int, what: str) -> int:
    if not (0 <= value < 2**32):
        raise FileFormatError(f"{what} {value} does not fit in u32")
    return value


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FileFormatError(f"{self.path}: truncated (needed {n} more bytes)")
        out = self.blob[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise FileFormatError(
                f"{self.path}: {len(self.blob) - self.pos} bytes of trailing garbage"
            )


# -- raster volumes --------------------------------------------------------------


def write_raster(path, arr: np.ndarray) -> None:
    """Write a (N, C, *spatial) array as a DLKV file."""
    arr = np.ascontiguousarray(arr)
    if arr.ndim not in (4, 5):
        raise FileFormatError(
            f"raster arrays are (N, C, spatial...) with rank 2 or 3, got {arr.shape}"
        )
    code = _dtype_code(arr)
    rank = arr.ndim - 2
    header = RASTER_MAGIC + struct.pack("<HBB", FORMAT_VERSION, code, rank)
    header += struct.pack(f"<{arr.ndim}I", *(_check_u32(d, "dim") for d in arr.shape))
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    if r.take(4) != RASTER_MAGIC:
        raise FileFormatError(f"{path}: bad magic (not a DLKV file)")
    version, code, rank = r.unpack("HBB")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unknown version {version}")
    if code not in _DTYPE_CODES:
        raise FileFormatError(f"{path}: unknown dtype code {code}")
    if rank not in (2, 3):
        raise FileFormatError(f"{path}: spatial rank must be 2 or 3, got {rank}")
    dims = r.unpack(f"{2 + rank}I")
    count = int(np.prod(dims, dtype=np.int64))
    dtype = _DTYPE_CODES[code]
    payload = r.take(count * dtype.itemsize)
    r.done()
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


# -- checkpoints -------------------------------------------------------------------


def checkpoint_save(path, named_tensors, config_text: str) -> None:
    """Write named arrays plus verbatim config text as a DLKC file.

    named_tensors is an ordered iterable of (name, array); entry order is
    preserved, so save -> load -> save is byte-identical.
    """
    entries = []
    payload = bytearray()
    for name, arr in named_tensors:
        # asarray with order="C", not ascontiguousarray: the latter silently
        # promotes 0-d arrays to shape (1,), breaking the shape round-trip
        arr = np.asarray(arr, order="C")
        code = _dtype_code(arr)
        if code == 2:
            raise FileFormatError(f"checkpoint tensors are float, got u8 for {name!r}")
        nb = name.encode("utf-8")
        if len(nb) >= 2**16:
            raise FileFormatError(f"tensor name too long: {name[:40]!r}...")
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append((nb, code, arr.shape, len(payload), len(data)))
        payload += data
    cfg_bytes = config_text.encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<H", FORMAT_VERSION)
    out += struct.pack("<I", _check_u32(len(cfg_bytes), "config length"))
    out += cfg_bytes
    out += struct.pack("<I", _check_u32(len(entries), "tensor count"))
    for nb, code, shape, offset, length in entries:
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, len(shape))
        out += struct.pack(f"<{len(shape)}I", *(_check_u32(d, "dim") for d in shape))
        out += struct.pack("<QQ", offset, length)
    out += payload
    with open(path, "wb") as f:
        f.write(out)


def checkpoint_load(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read a DLKC file back as (config_text, ordered name->array map)."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad magic (not a DLKC file)")
    (version,) = r.unpack("H")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unknown version {version}")
    (cfg_len,) = r.unpack("I")
    config_text = r.take(cfg_len).decode("utf-8")
    (count,) = r.unpack("I")
    directory = []
    for _ in range(count):
        (name_len,) = r.unpack("H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("BB")
        if code not in (0, 1):
            raise FileFormatError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"{rank}I") if rank else ()
        offset, length = r.unpack("QQ")
        directory.append((name, code, shape, offset, length))
    payload_start = r.pos
    tensors: dict[str, np.ndarray] = {}
    end = payload_start
    for name, code, shape, offset, length in directory:
        dtype = _DTYPE_CODES[code]
        count_elems = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count_elems * dtype.itemsize != length:
            raise FileFormatError(f"{path}: length mismatch for tensor {name!r}")
        lo = payload_start + offset
        hi = lo + length
        if hi > len(r.blob):
            raise FileFormatError(f"{path}: truncated payload for tensor {name!r}")
        if name in tensors:
            raise FileFormatError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(r.blob[lo:hi], dtype=dtype).reshape(shape).copy()
        end = max(end, hi)
    if end != len(r.blob):
        raise FileFormatError(f"{path}: {len(r.blob) - end} bytes of trailing garbage")
    return config_text, tensors
