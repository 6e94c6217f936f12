"""Small input-validation helpers used at API boundaries."""

import numpy as np

from .errors import InvalidTokenError, ShapeError


def as_byte_string(x, name: str = "data") -> bytes:
    """Coerce a bytes-like object to ``bytes``; reject ``str`` and others."""
    if isinstance(x, bytes):
        return x
    if isinstance(x, (bytearray, memoryview)):
        return bytes(x)
    if isinstance(x, np.ndarray) and x.dtype == np.uint8 and x.ndim == 1:
        return x.tobytes()
    raise TypeError(f"{name} must be a byte string, got {type(x).__name__}")


def check_tokens(tokens, vocab_size: int) -> np.ndarray:
    """Validate a 1-d integer token sequence against the vocabulary."""
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise ShapeError(f"token sequence must be 1-d, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidTokenError(f"tokens must be integers, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        bad = int(arr[(arr < 0) | (arr >= vocab_size)][0])
        raise InvalidTokenError(f"token {bad} outside [0, {vocab_size})")
    return arr.astype(np.int64, copy=False)


def check_embedding_matrix(e, max_len: int, embed_dim: int) -> np.ndarray:
    """Validate the per-position embedding matrix fed to the network."""
    arr = np.asarray(e, dtype=np.float64)
    if arr.shape != (max_len, embed_dim):
        raise ShapeError(
            f"embedding matrix must have shape ({max_len}, {embed_dim}), "
            f"got {arr.shape}"
        )
    return arr


def check_binary_labels(y) -> np.ndarray:
    """Validate a label vector of 0s (benign) and 1s (malware)."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ShapeError(f"labels must be 1-d, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"labels must be 0 or 1, got values {vals!r}")
    return arr.astype(np.int64)
