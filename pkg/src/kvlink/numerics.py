"""Dense kernels shared by the rest of the engine.

Matrices are plain 2-D ``float32`` numpy arrays. ``matmul`` accumulates in
float64 and rounds once to float32, so the result does not depend on the
summation order chosen by the BLAS backend at float32 resolution.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRowError, ShapeError

NEG_INF = np.float32(-1e30)


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, returned as float32.

    Leading batch dimensions broadcast as in ``np.matmul``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float32 BLAS product for the attention hot loop.

    Deterministic run to run for fixed shapes; summation order is left to the
    backend.
    """
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b, dtype=np.float32)


def _mask_array(mask) -> np.ndarray:
    allow = getattr(mask, "allow", mask)
    return np.asarray(allow, dtype=bool)


def mask_bias(allow: np.ndarray) -> np.ndarray:
    """Additive float32 bias: 0 where allowed, -1e30 where masked."""
    allow = np.asarray(allow, dtype=bool)
    if allow.ndim == 2 and allow.shape[1] and not allow.any(axis=1).all():
        row = int(np.flatnonzero(~allow.any(axis=1))[0])
        raise DegenerateRowError(f"mask row {row} has no allowed entry")
    return np.where(allow, np.float32(0.0), NEG_INF)


def softmax_biased_(scores: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """In-place row softmax of ``scores + bias``. ``scores`` must be float32."""
    scores += bias
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def masked_softmax(scores, mask) -> np.ndarray:
    """Row-wise softmax restricted to allowed entries.

    ``mask`` is a ``MaskMatrix`` or a boolean array of the same shape as
    ``scores``. Masked entries come out exactly 0.
    """
    scores = np.array(scores, dtype=np.float32)
    allow = _mask_array(mask)
    if allow.shape != scores.shape:
        raise ShapeError(f"scores {scores.shape} and mask {allow.shape} differ in shape")
    out = softmax_biased_(scores, mask_bias(allow))
    out[~allow] = 0.0
    return out


def rms_norm(x, gain, eps: float) -> np.ndarray:
    """Scale rows of ``x`` to unit RMS, then multiply by ``gain``."""
    x = np.asarray(x, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rms_norm length mismatch: {x.shape} vs gain {gain.shape}")
    if not eps > 0:
        raise ShapeError("eps must be positive")
    x64 = x.astype(np.float64)
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    return (x64 * inv * gain).astype(np.float32)
