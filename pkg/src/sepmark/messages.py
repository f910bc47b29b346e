"""Bit-message codec, binarization, and bit-error-ratio metrics.

Messages live in two domains: binary vectors in {0,1}^L, and their
zero-mean signal form in {-alpha, +alpha}^L that the networks embed and
extract. Everything here is a pure function over 1-D vectors or 2-D
(batch, length) arrays; torch tensors are accepted and detached on entry.
"""

from __future__ import annotations

import numpy as np


class MessageError(ValueError):
    """Malformed message payload (non-binary bits, bad hex, bad length)."""


def _as_array(values) -> np.ndarray:
    detach = getattr(values, "detach", None)
    if detach is not None:
        values = detach().cpu().numpy()
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise MessageError(f"expected a message vector or batch, got shape {arr.shape}")
    if arr.size == 0:
        raise MessageError("empty message")
    return arr


def encode_message(bits, alpha: float) -> np.ndarray:
    """Map {0,1} bits to signal levels: 1 -> +alpha, 0 -> -alpha."""
    if not alpha > 0:
        raise MessageError(f"alpha must be positive, got {alpha}")
    arr = _as_array(bits)
    if not np.isin(arr, (0.0, 1.0)).all():
        raise MessageError("bit message contains non-binary elements")
    return np.where(arr > 0.5, float(alpha), -float(alpha))


def binarize(values) -> np.ndarray:
    """Recover bits from signal values: 1 where positive, 0 otherwise (ties to 0)."""
    return (_as_array(values) > 0.0).astype(np.int64)


def bit_error_ratio(m_e, m_d) -> float:
    """Percentage of mismatched bits after binarization, averaged over batch and length."""
    a = binarize(m_e)
    b = binarize(m_d)
    if a.shape != b.shape:
        raise ValueError(f"message shape mismatch: {a.shape} vs {b.shape}")
    mismatches = int(np.count_nonzero(a ^ b))
    return 100.0 * mismatches / a.size


def random_bits(rng: np.random.Generator, length: int, batch: int | None = None) -> np.ndarray:
    """Uniform i.i.d. bits; (length,) or (batch, length)."""
    shape = (length,) if batch is None else (batch, length)
    return rng.integers(0, 2, size=shape, dtype=np.int64)


def bits_to_hex(bits) -> str:
    """Hex rendering of a single bit vector, MSB first, zero-padded to ceil(L/4) nibbles."""
    arr = binarize(bits)
    if arr.ndim != 1:
        raise MessageError("hex serialization takes a single message, not a batch")
    value = 0
    for b in arr:
        value = (value << 1) | int(b)
    return format(value, f"0{(arr.size + 3) // 4}x")


def hex_to_bits(text: str, length: int) -> np.ndarray:
    """Inverse of bits_to_hex for a message of known length."""
    if length <= 0:
        raise MessageError(f"message length must be positive, got {length}")
    nibbles = (length + 3) // 4
    if len(text) != nibbles:
        raise MessageError(f"expected {nibbles} hex digits for a {length}-bit message, got {len(text)}")
    try:
        value = int(text, 16)
    except ValueError as exc:
        raise MessageError(f"invalid hex message {text!r}") from exc
    if value >> length:
        raise MessageError(f"hex message {text!r} does not fit in {length} bits")
    return np.array([(value >> (length - 1 - i)) & 1 for i in range(length)], dtype=np.int64)
