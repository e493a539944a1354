"""KVQT binary tensor files and parameter checkpoints.

Record layout (little-endian)::

    b"KVQT" | u8 version | u8 dtype code | u32 rank | u32 dims[rank] | payload

A checkpoint is a concatenation of records plus a text manifest
(``<checkpoint>.manifest``) mapping each parameter path to its byte offset.
Manifest lines starting with ``#`` carry ``key=value`` metadata.
"""

import io
import os
import struct
import tempfile
from typing import BinaryIO, Dict, Mapping, Tuple, Union

import numpy as np

from .errors import ValidationError

MAGIC = b"KVQT"
VERSION = 1
DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
    5: np.dtype("<i4"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}

PathLike = Union[str, os.PathLike]


def _code_for(dtype: np.dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    try:
        return _CODE_OF[dt]
    except KeyError:
        raise ValueError(f"dtype {dtype} has no KVQT code") from None


def encode(array) -> bytes:
    arr = np.asarray(array)
    code = _code_for(arr.dtype)
    header = MAGIC + struct.pack("<BBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def read_record(fh: BinaryIO) -> np.ndarray:
    head = fh.read(10)
    if len(head) < 10 or head[:4] != MAGIC:
        raise ValidationError("not a KVQT record (bad magic)")
    version, code, rank = struct.unpack("<BBI", head[4:])
    if version != VERSION:
        raise ValidationError(f"unsupported KVQT version {version}")
    if code not in DTYPE_CODES:
        raise ValidationError(f"unknown KVQT dtype code {code}")
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise ValidationError("truncated KVQT header")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise ValidationError("truncated KVQT payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def decode(blob: bytes) -> np.ndarray:
    return read_record(io.BytesIO(blob))


def _atomic_write(path: PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: PathLike, array) -> None:
    _atomic_write(path, encode(array))


def load(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_record(fh)


def manifest_path(path: PathLike) -> str:
    return os.fspath(path) + ".manifest"


def save_checkpoint(path: PathLike, params: Mapping[str, np.ndarray], meta: Mapping[str, object] = ()) -> None:
    blob = bytearray()
    lines = [f"# {k}={v}" for k, v in dict(meta).items()]
    for key in sorted(params):
        if any(c.isspace() for c in key):
            raise ValueError(f"parameter path {key!r} contains whitespace")
        lines.append(f"{key}\t{len(blob)}")
        blob += encode(params[key])
    _atomic_write(path, bytes(blob))
    _atomic_write(manifest_path(path), ("\n".join(lines) + "\n").encode())


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    meta: Dict[str, str] = {}
    offsets: Dict[str, int] = {}
    with open(manifest_path(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
                continue
            key, _, off = line.partition("\t")
            if not off.isdigit():
                raise ValidationError(f"bad manifest line {line!r}", row=lineno)
            offsets[key] = int(off)
    params = {}
    with open(path, "rb") as fh:
        for key, off in offsets.items():
            fh.seek(off)
            params[key] = read_record(fh)
    return params, meta
