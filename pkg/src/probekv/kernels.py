"""Numeric kernels shared by the engine, the trainer, and the test oracles.

Everything here is a pure function over numpy arrays. Inference runs in
float32; callers that need tighter error bounds (finite-difference checks,
loss accumulation) pass float64 arrays and get float64 back. Given
identical inputs the outputs are bit-identical on one machine.
"""

from __future__ import annotations

import numpy as np


def softmax_row(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Stable softmax over a single score vector.

    Masked-out entries are exactly zero in the output; the rest are positive
    and sum to one. Uses max-subtraction so large scores do not overflow.
    """
    logits = np.asarray(logits)
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ValueError("mask shape does not match logits")
    if not mask.any():
        raise ValueError("empty attention row")
    shifted = logits - np.max(logits[mask])
    e = np.where(mask, np.exp(shifted, where=mask, out=np.zeros_like(shifted)), 0.0)
    return e / e.sum()


def softmax_rows(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise masked softmax over the last axis, any leading shape.

    `mask` broadcasts against `scores`; every row must have at least one
    allowed entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("empty attention row")
    neg = np.finfo(scores.dtype).min
    shifted = np.where(mask, scores, neg)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e = np.where(mask, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def rope_rotate(vec: np.ndarray, position: int, theta_base: float) -> np.ndarray:
    """Rotary position encoding of one vector at an absolute position.

    Consecutive pairs (2i, 2i+1) are rotated by position / theta_base^(2i/d),
    so the Euclidean norm is preserved.
    """
    vec = np.asarray(vec)
    if vec.ndim != 1 or vec.shape[0] % 2 != 0:
        raise ValueError("rope_rotate requires a 1-D vector of even length")
    if position < 0:
        raise ValueError("position must be >= 0")
    cos, sin = rope_tables(np.array([position]), vec.shape[0], theta_base, vec.dtype)
    out = apply_rope(vec.reshape(1, 1, -1), cos, sin)
    return out.reshape(-1)


def rope_tables(
    positions: np.ndarray, head_dim: int, theta_base: float, dtype
) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), head_dim // 2).

    Angles are computed in float64 and cast down once, so the same absolute
    position always yields the same table regardless of batch shape.
    """
    half = head_dim // 2
    inv_freq = theta_base ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate (T, H, head_dim) vectors by per-position tables (T, head_dim/2)."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def apply_rope_inverse(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Inverse rotation; the adjoint used by the backward pass."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c + odd * s
    out[..., 1::2] = -even * s + odd * c
    return out


def rms_norm(vec: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """out_i = gain_i * vec_i / sqrt(mean(vec^2) + eps)."""
    vec = np.asarray(vec)
    gain = np.asarray(gain)
    if vec.shape != gain.shape:
        raise ValueError("vec and gain must have the same length")
    return gain * vec / np.sqrt(np.mean(np.square(vec)) + eps)


def rms_norm_rows(
    x: np.ndarray, gain: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise RMS norm of (T, D); also returns 1/rms per row for backward."""
    inv = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1) + eps)
    inv = inv.astype(x.dtype)
    return x * inv[:, None] * gain[None, :], inv


def rms_norm_rows_backward(
    dy: np.ndarray, x: np.ndarray, inv: np.ndarray, gain: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dx, dgain) of y = x * inv_rms * gain for row-wise inputs."""
    d = x.shape[-1]
    dgain = (dy * x * inv[:, None]).sum(axis=0)
    dot = (dy * gain[None, :] * x).sum(axis=-1, keepdims=True)
    dx = dy * gain[None, :] * inv[:, None] - x * (inv**3 / d)[:, None] * dot
    return dx, dgain


def silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def silu_backward(z: np.ndarray) -> np.ndarray:
    """d silu(z) / dz."""
    sig = 1.0 / (1.0 + np.exp(-z))
    return sig * (1.0 + z * (1.0 - sig))
