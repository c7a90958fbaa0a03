"""Binary checkpoint and dataset formats.

Checkpoint (little-endian)::

    b"MSTC" | u16 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 dtype (0=f64, 1=f32)
               | u8 trainable | u8 rank | rank x u32 dims | raw data

Dataset (little-endian)::

    b"MSPC" | u16 version | u32 sample count | u16 class count
    per sample: u32 label | u32 N | N x 3 f32 coordinates

Readers validate the whole file before returning anything.
"""
from __future__ import annotations

import json
import math
import os
import struct
from typing import Dict, List, Tuple

import numpy as np

from .errors import FormatError

CKPT_MAGIC = b"MSTC"
DATA_MAGIC = b"MSPC"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, context: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what} while reading {context}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, context: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), context))

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in {self.what}")


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e


def _write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise FormatError(f"cannot write {path}: {e}") from e


# --------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(entries: Dict[str, Tuple[np.ndarray, bool]]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name in sorted(entries):
        arr, trainable = entries[name]
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BBB", _DTYPE_CODES[dt], int(bool(trainable)), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Dict[str, Tuple[np.ndarray, bool]]:
    r = _Reader(buf, "checkpoint")
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of entry {i}")
        try:
            name = r.take(n, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"entry {i} name is not UTF-8") from e
        code, trainable, rank = r.unpack("<BBB", f"header of {name!r}")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        dt = _CODE_DTYPES[code]
        size = math.prod(dims) * dt.itemsize  # python ints: corrupt dims cannot overflow
        arr = np.frombuffer(r.take(size, f"data of {name!r}"), dtype=dt).reshape(dims).copy()
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}")
        out[name] = (arr, bool(trainable))
    r.finish()
    return out


def save_checkpoint(path, entries: Dict[str, Tuple[np.ndarray, bool]], meta: dict = None) -> None:
    _write_bytes(path, encode_checkpoint(entries))
    if meta is not None:
        _write_bytes(f"{path}.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())


def load_checkpoint(path) -> Dict[str, Tuple[np.ndarray, bool]]:
    return decode_checkpoint(_read_bytes(path))


def load_meta(path) -> dict:
    try:
        return json.loads(_read_bytes(f"{path}.json"))
    except json.JSONDecodeError as e:
        raise FormatError(f"bad sidecar for {path}: {e}") from e


def model_entries(model) -> Dict[str, Tuple[np.ndarray, bool]]:
    return {k: (v, k in model.trainable) for k, v in model.named_parameters().items()}


# --------------------------------------------------------------------------
# datasets


def encode_dataset(labels: List[int], clouds: List[np.ndarray], n_classes: int) -> bytes:
    parts = [DATA_MAGIC, struct.pack("<HIH", VERSION, len(labels), n_classes)]
    for y, pts in zip(labels, clouds):
        pts = np.ascontiguousarray(pts, dtype="<f4")
        parts.append(struct.pack("<II", int(y), len(pts)))
        parts.append(pts.tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes):
    r = _Reader(buf, "dataset")
    if r.take(4, "magic") != DATA_MAGIC:
        raise FormatError("bad dataset magic")
    version, count, n_classes = r.unpack("<HIH", "header")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    labels, clouds = [], []
    for i in range(count):
        y, n = r.unpack("<II", f"sample {i} header")
        if y >= n_classes:
            raise FormatError(f"sample {i} label {y} outside [0, {n_classes})")
        pts = np.frombuffer(r.take(12 * n, f"sample {i} points"), dtype="<f4").reshape(n, 3)
        if not np.all(np.isfinite(pts)):
            raise FormatError(f"sample {i} has non-finite coordinates")
        labels.append(y)
        clouds.append(pts.astype(np.float64))
    r.finish()
    return np.asarray(labels, dtype=np.int64), clouds, n_classes


def save_dataset(path, labels, clouds, n_classes: int, meta: dict = None) -> None:
    _write_bytes(path, encode_dataset(list(labels), list(clouds), n_classes))
    if meta is not None:
        _write_bytes(f"{path}.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())


def load_dataset(path):
    return decode_dataset(_read_bytes(path))
