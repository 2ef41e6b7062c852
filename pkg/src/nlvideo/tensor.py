"""Dense tensor substrate.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 or float64.  A
video feature map is a tensor of shape ``(T, H, W, C)``: the C-vector at
zero-based position ``(t, h, w)`` is ``x[t, h, w]``.  One-based coordinates
``(t', h', w')`` map to ``(t' - 1, h' - 1, w' - 1)``.

Positions are flattened in row-major order, ``p = (t * H + h) * W + w``, so
``x.reshape(-1, C)[p]`` is the vector at ``(t, h, w)``.

NLT1 file layout (little-endian, no padding)::

    4 bytes   magic b"NLT1"
    1 byte    dtype code (0 = f32, 1 = f64)
    1 byte    rank r, 1..8
    r * u64   extents, each >= 1
    payload   prod(extents) IEEE-754 scalars, row-major
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"NLT1"
MAX_RANK = 8
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    """Base class for malformed NLT1 input."""


class BadMagicError(TensorFormatError):
    pass


class BadDtypeError(TensorFormatError):
    pass


class BadRankError(TensorFormatError):
    pass


class BadExtentError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class TrailingDataError(TensorFormatError):
    pass


class ChannelMismatchError(ValueError):
    pass


def check_tensor(t: np.ndarray) -> np.ndarray:
    """Validate that ``t`` is a supported tensor and return it."""
    if not isinstance(t, np.ndarray):
        raise TypeError(f"expected numpy.ndarray, got {type(t).__name__}")
    if t.dtype not in _CODES:
        raise TypeError(f"unsupported dtype {t.dtype}; use float32 or float64")
    if t.ndim < 1 or t.ndim > MAX_RANK:
        raise ValueError(f"rank must be in 1..{MAX_RANK}, got {t.ndim}")
    if any(n < 1 for n in t.shape):
        raise ValueError(f"all extents must be >= 1, got {t.shape}")
    return t


def encode_tensor(t: np.ndarray) -> bytes:
    t = check_tensor(t)
    header = MAGIC + bytes([_CODES[t.dtype], t.ndim]) + struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise TruncatedPayloadError(f"header needs 6 bytes, got {len(buf)}")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    code, rank = buf[4], buf[5]
    if code not in _DTYPES:
        raise BadDtypeError(f"unknown dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise BadRankError(f"rank {rank} outside 1..{MAX_RANK}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise TruncatedPayloadError("file ends inside the extent list")
    shape = struct.unpack(f"<{rank}Q", buf[6:off])
    if any(n < 1 for n in shape):
        raise BadExtentError(f"zero extent in shape {shape}")
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=object)) * dtype.itemsize
    have = len(buf) - off
    if have < nbytes:
        raise TruncatedPayloadError(f"payload has {have} bytes, expected {nbytes}")
    if have > nbytes:
        raise TrailingDataError(f"{have - nbytes} bytes after payload")
    data = np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def write_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    data = encode_tensor(t)
    with open(path, "wb") as f:
        f.write(data)


def check_feature_map(x: np.ndarray) -> np.ndarray:
    check_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"feature map must have shape (T, H, W, C), got {x.shape}")
    return x


def flat_index(t: int, h: int, w: int, dims: tuple[int, int, int]) -> int:
    _, H, W = dims
    return (t * H + h) * W + w


def position_coords(dims: tuple[int, int, int]) -> np.ndarray:
    """(N, 3) integer array of (t, h, w) for every position in flat order."""
    T, H, W = dims
    grid = np.meshgrid(np.arange(T), np.arange(H), np.arange(W), indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def project_pointwise(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Apply the same linear map to every position of a feature map.

    ``weights`` has shape ``(C_out, C_in)``; the result has shape
    ``(T, H, W, C_out)``.
    """
    check_feature_map(x)
    if weights.ndim != 2 or weights.shape[1] != x.shape[-1]:
        raise ChannelMismatchError(
            f"weights {weights.shape} do not accept {x.shape[-1]} input channels"
        )
    out = x @ weights.T
    if bias is not None:
        if bias.shape != (weights.shape[0],):
            raise ChannelMismatchError(f"bias {bias.shape} does not match {weights.shape[0]} outputs")
        out = out + bias
    return out


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    if np.isnan(scores).any():
        raise ValueError("softmax_rows: NaN in input")
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return probs * (grad - (grad * probs).sum(axis=-1, keepdims=True))
