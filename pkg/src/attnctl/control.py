"""Cross-attention control: steering attention toward layout regions.

Four methods are implemented, all operating on the scaled attention logits of
one layer and the region masks resampled to that layer's resolution:

* ``ediffi``          — additive logit bias: mask * noise-level weight
                        ``log(1 + sigma^2)`` * per-head logit spread.
* ``cac``             — multiply the softmax output by the mask and leave the
                        rows unnormalized (attention mass outside a token's
                        region is simply dropped).
* ``dense_diffusion`` — additive bias that pushes logits toward the observed
                        per-head max inside the region and toward the min
                        outside it, decaying with the timestep as (t/T)^5 and
                        weighted by how small the region is.
* ``ca_redist``       — split each row into a local softmax (over tokens of
                        regions covering the pixel) and a global softmax (over
                        tokens without a region), then mix them with the
                        attention mass m the row originally spent on region
                        tokens.  Mass never leaks across region boundaries,
                        and rows still sum to one.

The mixing weight of ``ca_redist`` can additionally be boosted
multiplicatively (``w_m``) and additively (``w_a``), gated by a sine ramp
over timesteps (``boost_schedule``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .attention import NEG_BIAS, AttentionTensor, attention_logits, stable_softmax
from .errors import DimensionMismatch, OutOfRange, UnknownMethod
from .regions import RegionLayout, TokenAlignment

METHODS = ("none", "ediffi", "cac", "dense_diffusion", "ca_redist")


def default_softness(w_m: float, w_a: float) -> float:
    """Ramp softness that pairs well with the boost mode: 0.8 when the
    multiplicative boost is in play (or no boost at all), 0.6 for a purely
    additive boost."""
    return 0.6 if (w_m == 0.0 and w_a > 0.0) else 0.8


@dataclass(frozen=True)
class ControlConfig:
    """Settings of a control method.

    ``w_prime`` scales the additive-bias methods (ediffi / dense_diffusion).
    ``w_m`` / ``w_a`` boost the ca_redist mixing weight; ``t_thr`` (defaults
    to the sampler's step count, i.e. boost fades out over the first part of
    sampling) and ``softness`` shape the boost ramp.
    """

    method: str = "none"
    w_prime: float = 0.5
    w_m: float = 0.0
    w_a: float = 0.0
    t_thr: int | None = None
    softness: float = 0.8
    # When undoing the 1/sqrt(d) pre-scaling for the logit-spread statistic is
    # not wanted (measure the spread of the scaled logits instead), unset this.
    ediffi_unscaled_std: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise UnknownMethod(f"method {self.method!r}; known: {METHODS}")
        if self.w_prime < 0 or self.w_m < 0 or self.w_a < 0:
            raise OutOfRange("control weights must be >= 0")
        if not 0.0 <= self.softness <= 1.0:
            raise OutOfRange(f"softness {self.softness} outside [0, 1]")
        if self.t_thr is not None and self.t_thr < 0:
            raise OutOfRange(f"t_thr {self.t_thr} must be >= 0")

    def with_(self, **kw) -> "ControlConfig":
        return replace(self, **kw)

    @classmethod
    def redistribution(cls, w_m: float = 0.0, w_a: float = 0.0, **kw) -> "ControlConfig":
        kw.setdefault("softness", default_softness(w_m, w_a))
        return cls(method="ca_redist", w_m=w_m, w_a=w_a, **kw)


@dataclass(frozen=True)
class StepContext:
    """Where the sampler is: step t counts down from total_steps to 0, and
    sigma is the noise level at t."""

    t: float
    total_steps: int
    sigma: float = 0.0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise OutOfRange(f"total_steps {self.total_steps} must be positive")
        if not 0 <= self.t <= self.total_steps:
            raise OutOfRange(f"step {self.t} outside [0, {self.total_steps}]")
        if self.sigma < 0:
            raise OutOfRange(f"sigma {self.sigma} must be >= 0")


@dataclass
class ControlDiagnostics:
    """Counters and summaries filled in by apply_control / redistribute.

    ``no_local`` counts pixels that no region token covers (their rows fall
    back to the global branch); ``no_global`` counts pixels lacking any
    non-region token to build a global branch from (all of them, whenever
    every token names a region).  Both can fire for the same pixel, in which
    case its row is left as the plain softmax.
    """

    no_local: int = 0
    no_global: int = 0
    m_means: np.ndarray | None = None
    boost: float | None = None


def boost_schedule(t: float, t_thr: float, softness: float, total_steps: int) -> float:
    """Ramp in [0, 1]: 1 early in sampling (high t), 0 late, with a sine
    transition of width ``softness * total_steps`` centered on ``t_thr``.
    Zero softness degenerates to a step function (value 0.5 exactly at the
    threshold)."""
    if not 0.0 <= softness <= 1.0:
        raise OutOfRange(f"softness {softness} outside [0, 1]")
    if total_steps <= 0:
        raise OutOfRange(f"total_steps {total_steps} must be positive")
    if softness == 0.0:
        if t > t_thr:
            return 1.0
        return 0.5 if t == t_thr else 0.0
    half = softness * total_steps / 2.0
    t_start, t_end = t_thr + half, t_thr - half
    if t >= t_start:
        return 1.0
    if t <= t_end:
        return 0.0
    return 0.5 + 0.5 * math.sin(math.pi * (t - t_thr) / (t_start - t_end))


# --- per-method row transforms --------------------------------------------
# All take scaled logits (heads, pixels, tokens) plus a gain matrix
# (pixels, tokens): the mask value of the token's region at that pixel, with
# 1.0 for tokens that have no region.


def _check_gain(logits: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if logits.ndim != 3:
        raise DimensionMismatch(f"logits must be 3-D, got {logits.shape}")
    if gain.shape != logits.shape[1:]:
        raise DimensionMismatch(
            f"gain shape {gain.shape} does not match logits {logits.shape}"
        )
    return logits, gain


def ediffi_attention(
    logits: np.ndarray,
    gain: np.ndarray,
    sigma: float,
    w_prime: float = 0.5,
    head_dim: int = 1,
    unscaled_std: bool = True,
) -> np.ndarray:
    """Additive mask bias weighted by noise level and per-head logit spread.

    The spread is the population std over a head's whole pixels-x-tokens
    plane, taken on the raw dot products (the 1/sqrt(d) pre-scaling undone
    via ``head_dim``) unless ``unscaled_std`` is off.  At sigma == 0 the bias
    vanishes and rows reduce to the plain softmax.
    """
    logits, gain = _check_gain(logits, gain)
    base = logits * math.sqrt(head_dim) if unscaled_std else logits
    spread = base.std(axis=(1, 2))  # population std per head
    strength = w_prime * math.log1p(sigma * sigma)
    bias = strength * spread[:, None, None] * gain[None, :, :]
    return stable_softmax(logits + bias)


def cac_attention(logits: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Mask the softmax output.  Rows are deliberately not renormalized:
    whatever mass fell on a token outside its region is dropped, so row sums
    are <= 1."""
    logits, gain = _check_gain(logits, gain)
    return stable_softmax(logits) * gain[None, :, :]


def dd_attention(
    logits: np.ndarray,
    gain: np.ndarray,
    token_area: np.ndarray,
    t: float,
    total_steps: int,
    w_prime: float = 0.5,
    head_dim: int = 1,
) -> np.ndarray:
    """Additive bias pulling in-region logits up toward the head's max and
    out-of-region logits down toward its min.

    ``token_area`` is the fraction of the canvas each token's region covers;
    small regions get a stronger push via the (1 - area) factor, and tokens
    without a region (area 1) none at all.  The whole bias decays as (t/T)^5
    and is exactly zero at t == 0.
    """
    logits, gain = _check_gain(logits, gain)
    token_area = np.asarray(token_area, dtype=np.float64)
    if token_area.shape != (logits.shape[2],):
        raise DimensionMismatch(
            f"token_area shape {token_area.shape}, expected ({logits.shape[2]},)"
        )
    raw = logits * math.sqrt(head_dim)
    hi = raw.max(axis=(1, 2), keepdims=True)
    lo = raw.min(axis=(1, 2), keepdims=True)
    toward_max = hi - raw
    toward_min = raw - lo
    decay = w_prime * (t / total_steps) ** 5
    g = gain[None, :, :]
    bias = decay * (1.0 - token_area)[None, None, :] * (g * toward_max - (1.0 - g) * toward_min)
    return stable_softmax(logits + bias)


def redistribute(
    logits: np.ndarray,
    gain: np.ndarray,
    region_token: np.ndarray,
    pixel_area: np.ndarray,
    w_m: float = 0.0,
    w_a: float = 0.0,
    boost: float = 0.0,
    probs: np.ndarray | None = None,
    diagnostics: ControlDiagnostics | None = None,
) -> np.ndarray:
    """Mix a region-local and a region-free softmax of each attention row.

    For pixel p, the local branch renormalizes over tokens whose region
    covers p (others get NEG_BIAS; fractional coverage enters as log(gain)),
    and the global branch renormalizes over tokens that name no region.  The
    mixing weight starts as m, the probability mass the *unmodified* row put
    on region tokens, optionally boosted:

        m* = clip(m * (1 + w_m * boost) + w_a * boost * (1 - pixel_area), 0, 1)

    Consequences worth knowing: a region token gets exactly zero attention at
    pixels its region does not cover; tokens without a region keep exactly
    their original attention when no boost is applied; and each row still
    sums to one.

    Degenerate pixels fall back gracefully: no coverage by any region token
    -> the row becomes the global branch (m* forced to 0); no region-free
    tokens at all -> rows become the local branch (m* forced to 1); both at
    once -> the row is left as the plain softmax.  Occurrences are counted in
    ``diagnostics``.
    """
    logits, gain = _check_gain(logits, gain)
    heads, hw, n = logits.shape
    region_token = np.asarray(region_token, dtype=bool)
    pixel_area = np.asarray(pixel_area, dtype=np.float64)
    if region_token.shape != (n,):
        raise DimensionMismatch(f"region_token shape {region_token.shape}, expected ({n},)")
    if pixel_area.shape != (hw,):
        raise DimensionMismatch(f"pixel_area shape {pixel_area.shape}, expected ({hw},)")
    if probs is None:
        probs = stable_softmax(logits)

    # Local branch: log(gain) bias on region tokens, everything else removed.
    with np.errstate(divide="ignore"):
        log_gain = np.log(np.where(gain > 0.0, gain, 1.0))
    local_bias = np.where(region_token[None, :] & (gain > 0.0),
                          np.maximum(log_gain, NEG_BIAS), NEG_BIAS)
    a_local = stable_softmax(logits + local_bias[None, :, :])

    # Global branch: region tokens removed.
    global_bias = np.where(region_token, NEG_BIAS, 0.0)
    a_global = stable_softmax(logits + global_bias[None, None, :])

    has_local = ((gain > 0.0) & region_token[None, :]).any(axis=1)  # (hw,)
    has_global = bool((~region_token).any())

    m = np.einsum("hpn,n->hp", probs, region_token.astype(np.float64))
    mstar = np.clip(m * (1.0 + w_m * boost) + w_a * boost * (1.0 - pixel_area)[None, :],
                    0.0, 1.0)

    # Fallback overrides.  Degenerate branch softmaxes come out uniform (the
    # max-shift hits the sentinel itself); giving them weight exactly 0 keeps
    # them out of the mix without special-casing the blend below.
    if has_global:
        mstar[:, ~has_local] = 0.0
    else:
        mstar[:, has_local] = 1.0
        mstar[:, ~has_local] = 0.0

    out = mstar[:, :, None] * a_local + (1.0 - mstar[:, :, None]) * a_global
    if not has_global:
        out[:, ~has_local, :] = probs[:, ~has_local, :]

    if diagnostics is not None:
        diagnostics.no_local += int(np.count_nonzero(~has_local))
        diagnostics.no_global += 0 if has_global else hw
        diagnostics.m_means = mstar.mean(axis=1)
        diagnostics.boost = float(boost)
    return out


# --- assembling gain matrices from a layout --------------------------------


def region_gain(
    layout: RegionLayout, alignment: TokenAlignment, layer_h: int, layer_w: int
) -> np.ndarray:
    """(pixels, tokens) matrix of each token's region mask at layer resolution.

    Tokens without a region get a column of ones (they are "everywhere").
    """
    at = layout.at_resolution(layer_h, layer_w)
    hw = layer_h * layer_w
    tr = np.asarray(alignment.token_region)
    gain = np.ones((hw, tr.size), dtype=np.float64)
    flat = at.masks.reshape(at.n_regions, hw)
    for i, r in enumerate(tr):
        if r > 0:
            if r > at.n_regions:
                raise DimensionMismatch(
                    f"token {i} references region {r}, layout has {at.n_regions}"
                )
            gain[:, i] = flat[r - 1]
    return gain


def pixel_region_area(
    layout: RegionLayout, alignment: TokenAlignment, layer_h: int, layer_w: int
) -> np.ndarray:
    """Canvas fraction of the region each pixel belongs to, as a (pixels,)
    vector.

    A pixel belongs to whichever token-referenced region covers it with the
    highest mask value (ties break to the lowest region id).  Pixels covered
    by none get area 1.0, which neutralizes the additive boost there.  Areas
    are measured at the layout's own resolution, not the layer's.
    """
    at = layout.at_resolution(layer_h, layer_w)
    hw = layer_h * layer_w
    referenced = sorted({int(r) for r in np.asarray(alignment.token_region) if r > 0})
    best_val = np.zeros(hw, dtype=np.float64)
    best_region = np.zeros(hw, dtype=np.int64)
    for r in referenced:
        v = at.masks[r - 1].reshape(hw)
        take = v > best_val
        best_val[take] = v[take]
        best_region[take] = r
    return layout.area_fractions()[best_region]


def apply_control(
    source,
    layout: RegionLayout,
    alignment: TokenAlignment,
    cfg: ControlConfig,
    ctx: StepContext,
    layer_h: int | None = None,
    layer_w: int | None = None,
    head_dim: int = 1,
    probs: np.ndarray | None = None,
    diagnostics: ControlDiagnostics | None = None,
) -> np.ndarray:
    """Run one control method over a layer's attention and return the
    (heads, pixels, tokens) probability rows.

    ``source`` is either scaled logits (array or AttentionTensor) or a
    (q, k) pair, in which case the logits and ``head_dim`` are derived.
    Layer height/width default to a square grid matching the pixel count.
    """
    if isinstance(source, tuple):
        q, k = source
        logits = attention_logits(q, k)
        head_dim = int(np.asarray(q).shape[-1])
    elif isinstance(source, AttentionTensor):
        logits = source.logits
    else:
        logits = np.asarray(source, dtype=np.float64)
        if logits.ndim != 3:
            raise DimensionMismatch(f"logits must be (heads, pixels, tokens), got {logits.shape}")

    heads, hw, n = logits.shape
    if alignment.n_tokens != n:
        raise DimensionMismatch(
            f"alignment covers {alignment.n_tokens} tokens, logits have {n}"
        )
    if layer_h is None or layer_w is None:
        side = math.isqrt(hw)
        if side * side != hw:
            raise DimensionMismatch(
                f"pixel count {hw} is not square; pass layer_h and layer_w"
            )
        layer_h = layer_w = side
    if layer_h * layer_w != hw:
        raise DimensionMismatch(f"layer {layer_h}x{layer_w} != {hw} pixels")

    if cfg.method == "none":
        return stable_softmax(logits) if probs is None else np.asarray(probs, dtype=np.float64)

    gain = region_gain(layout, alignment, layer_h, layer_w)
    if cfg.method == "ediffi":
        return ediffi_attention(
            logits, gain, ctx.sigma, w_prime=cfg.w_prime,
            head_dim=head_dim, unscaled_std=cfg.ediffi_unscaled_std,
        )
    if cfg.method == "cac":
        return cac_attention(logits, gain)
    if cfg.method == "dense_diffusion":
        token_area = layout.area_fractions()[np.asarray(alignment.token_region)]
        return dd_attention(
            logits, gain, token_area, ctx.t, ctx.total_steps,
            w_prime=cfg.w_prime, head_dim=head_dim,
        )
    # ca_redist
    t_thr = ctx.total_steps if cfg.t_thr is None else cfg.t_thr
    boost = boost_schedule(ctx.t, t_thr, cfg.softness, ctx.total_steps)
    pixel_area = pixel_region_area(layout, alignment, layer_h, layer_w)
    return redistribute(
        logits, gain, alignment.region_token_mask(), pixel_area,
        w_m=cfg.w_m, w_a=cfg.w_a, boost=boost,
        probs=probs, diagnostics=diagnostics,
    )
