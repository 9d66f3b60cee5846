"""Binary file formats: ANR1 tensors and P5/P6 netpbm images.

ANR1 layout: magic ``ANR1``, u32-LE rank, rank x u32-LE dims, then
product(dims) float32-LE values in row-major order. Images are plain
binary PGM (P5, grayscale) / PPM (P6, RGB) with maxval 255.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

ANR1_MAGIC = b"ANR1"
MAX_RANK = 8


def write_tensor(path, tensor) -> None:
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    data = np.ascontiguousarray(data, dtype="<f4")
    dims = data.shape
    if len(dims) > MAX_RANK:
        raise FormatError(f"rank {len(dims)} exceeds maximum {MAX_RANK}")
    with open(path, "wb") as fh:
        fh.write(ANR1_MAGIC)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(data.tobytes())


def read_tensor(path) -> Tensor:
    blob = Path(path).read_bytes()
    if blob[:4] != ANR1_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header at offset {len(blob)}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank > MAX_RANK:
        raise FormatError(f"{path}: rank {rank} exceeds maximum {MAX_RANK} at offset 4")
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated dims at offset {len(blob)}")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero dimension at offset 8")
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = dims_end + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload ends at offset {len(blob)}, expected {expected}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=dims_end, count=count)
    return Tensor(values.reshape(dims))


def _quantize(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to bytes with round-half-up (0.5 -> 128)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_image(path, values: np.ndarray) -> None:
    """Write [H,W], [H,W,1] as P5 or [H,W,3] as P6, maxval 255."""
    arr = np.asarray(values)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot write image of shape {np.asarray(values).shape}")
    h, w = arr.shape[:2]
    payload = _quantize(arr).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}".encode() + b"\n255\n")
        fh.write(payload)


def _read_header_tokens(blob: bytes, n_tokens: int):
    """Whitespace/comment-tolerant netpbm header scan; returns the tokens
    and the offset of the first payload byte."""
    tokens = []
    i = 0
    while len(tokens) < n_tokens:
        if i >= len(blob):
            raise FormatError(f"truncated header at offset {i}")
        c = blob[i : i + 1]
        if c == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i + 1  # single whitespace byte after maxval


def read_image(path) -> np.ndarray:
    """Read P5/P6 into float32 [H,W,ch] scaled to [0,1]."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise FormatError(f"{path}: bad magic at offset 0")
    tokens, offset = _read_header_tokens(blob[2:], 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field") from None
    if maxval <= 0 or maxval > 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    offset += 2  # account for the magic bytes skipped above
    expected = w * h * channels
    payload = blob[offset : offset + expected]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload ends at offset {offset + len(payload)}, "
            f"expected {offset + expected}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return (arr.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def export_heatmap(values: np.ndarray, path) -> None:
    """Score map [H,W,1] to a grayscale P5 heatmap, clamped to [0,1]."""
    arr = np.asarray(values)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise FormatError(f"heatmap expects [H,W,1] or [H,W], got {arr.shape}")
    write_image(path, arr)
