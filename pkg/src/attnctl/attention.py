"""Scaled dot-product attention primitives on (heads, pixels, tokens) arrays.

All math here runs in float64.  Masking uses a large *finite* negative bias
(``NEG_BIAS``) rather than -inf: after the max-shift inside the softmax,
masked entries underflow to exactly 0.0, while -inf would poison rows that
are masked everywhere with NaNs.  A row whose maximum sits below
``MASKED_CUTOFF`` is considered fully masked — callers that can recover
(see control.py) check for that themselves; ``softmax_rows`` raises.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllMaskedRow, DimensionMismatch, ZeroDimension

# Additive bias that effectively removes a token from a softmax row.  Finite
# on purpose: exp(NEG_BIAS - rowmax) flushes to zero for any realistic rowmax.
NEG_BIAS = -1.0e9

# Rows with max logit at or below this are treated as "everything masked".
# Sits three orders of magnitude above NEG_BIAS so ordinary logits added on
# top of the bias cannot cross it.
MASKED_CUTOFF = -1.0e8


@dataclass(frozen=True, eq=False)
class AttentionTensor:
    """Scaled attention logits for one layer: (heads, pixels, tokens)."""

    logits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.logits, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionMismatch(
                f"attention logits must be (heads, pixels, tokens), got {arr.shape}"
            )
        if 0 in arr.shape:
            raise ZeroDimension(f"attention logits shape {arr.shape} has a zero axis")
        if not np.all(np.isfinite(arr)):
            raise DimensionMismatch("attention logits contain non-finite values")
        object.__setattr__(self, "logits", arr)

    @property
    def heads(self) -> int:
        return self.logits.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.logits.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.logits.shape[2]


def attention_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Scaled logits Q K^T / sqrt(d) for Q (heads, p, d) and K (heads, n, d)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 3 or k.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise DimensionMismatch(f"incompatible q {q.shape} / k {k.shape}")
    d = q.shape[2]
    return np.einsum("hpd,hnd->hpn", q, k) / np.sqrt(float(d))


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax.  Fully-masked rows come out uniform; callers that
    care must test row maxima against MASKED_CUTOFF first."""
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, refusing rows that are masked everywhere."""
    arr = np.asarray(logits, dtype=np.float64)
    if np.any(arr.max(axis=-1) <= MASKED_CUTOFF):
        raise AllMaskedRow("softmax row has every entry masked out")
    return stable_softmax(arr, axis=-1)


def apply_values(probs: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Attention readout: probs (heads, p, n) x V (heads, n, dv) -> (heads, p, dv)."""
    probs = np.asarray(probs, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if probs.ndim != 3 or v.ndim != 3 or probs.shape[0] != v.shape[0] or probs.shape[2] != v.shape[1]:
        raise DimensionMismatch(f"incompatible probs {probs.shape} / v {v.shape}")
    return np.einsum("hpn,hnd->hpd", probs, v)
