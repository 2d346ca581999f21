"""Reader for MNIST-style IDX files (optionally gzipped)."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .model import Samples

_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class IdxFormatError(ValueError):
    pass


def read_idx(path: str | Path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise IdxFormatError(f"{path}: bad magic number")
    dtype_code, ndim = data[2], data[3]
    if dtype_code not in _DTYPES:
        raise IdxFormatError(f"{path}: unknown element type 0x{dtype_code:02x}")
    header_end = 4 + 4 * ndim
    shape = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = np.dtype(_DTYPES[dtype_code])
    count = int(np.prod(shape)) if shape else 1
    if len(data) - header_end != count * dtype.itemsize:
        raise IdxFormatError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype=dtype, offset=header_end).reshape(shape)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}
    arr = np.ascontiguousarray(array)
    if arr.dtype not in codes:
        raise IdxFormatError("only uint8/int8 arrays are supported for writing")
    header = bytes([0, 0, codes[arr.dtype], arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_mnist(images_path: str | Path, labels_path: str | Path) -> Samples:
    """Images flattened and scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError("image and label counts differ")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Samples(features, labels.astype(np.int64))
