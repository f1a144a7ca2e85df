"""A miniature, fully deterministic diffusion harness.

This is not a real image model.  It is a numpy re-creation of the *shape* of
a latent diffusion U-Net with a hint-conditioned control branch, just large
enough that the cross-attention control methods can be exercised end to end:
random-but-fixed weights, a 16x16x4 latent, two attention heads, three
cross-attention sites (two on the way down, one in the middle), a control
branch that copies the down path and injects a pooled color rendering of the
layout, and a deterministic 50-step eta=0 sampler.

Everything is driven by SplitMix64 streams so results are reproducible
bit-for-bit across runs and machines.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import apply_values, attention_logits
from .control import ControlConfig, ControlDiagnostics, StepContext, apply_control
from .errors import DimensionMismatch, NonFiniteLatent, OutOfRange
from .layout_io import region_colors, render_segmap
from .regions import RegionLayout, TokenAlignment, build_alignment, parse_annotated_prompt, whitespace_token_spans
from .rng import SplitMix64, fnv1a64, unit_vector

# Color-coding of layout regions for the control hint is fixed, so the hint
# for a given layout never changes between runs.
HINT_COLOR_SEED = 0x51E9A


# --- noise schedule --------------------------------------------------------

def alpha_bar_schedule(total_t: int = 1000) -> np.ndarray:
    """Cumulative signal fractions for a linear 1e-4..0.02 beta ramp.

    Indexable by timestep directly: entry 0 is 1.0 (no noise), entry t is the
    product of (1 - beta) over the first t steps.
    """
    betas = np.linspace(1e-4, 0.02, total_t)
    return np.concatenate(([1.0], np.cumprod(1.0 - betas)))


def sigma_at(t: int, alpha_bar: np.ndarray) -> float:
    """Noise-to-signal ratio sqrt((1 - abar_t) / abar_t); zero at t = 0."""
    ab = float(alpha_bar[t])
    return math.sqrt((1.0 - ab) / ab)


def ddim_times(steps: int = 50, total_t: int = 1000) -> list[tuple[int, int]]:
    """(t, t_prev) pairs for an evenly spaced descending schedule ending at 0."""
    if steps <= 0 or total_t % steps != 0:
        raise OutOfRange(f"steps {steps} must divide total_t {total_t}")
    stride = total_t // steps
    ts = list(range(total_t, 0, -stride))
    return [(t, t - stride) for t in ts]


# --- conditioning ----------------------------------------------------------

def prompt_embedding(text: str, dim: int = 8) -> np.ndarray:
    """One deterministic unit vector per whitespace token, hashed from its text."""
    spans = whitespace_token_spans(text)
    if not spans:
        raise DimensionMismatch("prompt has no tokens")
    return np.array([unit_vector(fnv1a64(text[a:b]), dim) for a, b in spans])


def conditioning_from_annotated(raw_prompt: str, layout: RegionLayout,
                                dim: int = 8) -> tuple[np.ndarray, TokenAlignment]:
    """Parse an annotated prompt and produce (token embeddings, alignment)."""
    prompt = parse_annotated_prompt(raw_prompt)
    spans = whitespace_token_spans(prompt.text)
    alignment = build_alignment(prompt, spans, layout)
    return prompt_embedding(prompt.text, dim), alignment


def hint_from_layout(layout: RegionLayout, size: int = 16) -> np.ndarray:
    """(3, size, size) float hint: the color segmap mean-pooled down."""
    img = render_segmap(layout, region_colors(layout.n_regions, HINT_COLOR_SEED))
    h, w = img.shape[:2]
    if h % size or w % size:
        raise DimensionMismatch(f"layout {h}x{w} not divisible by hint size {size}")
    fy, fx = h // size, w // size
    pooled = img.reshape(size, fy, size, fx, 3).mean(axis=(1, 3)) / 255.0
    return np.moveaxis(pooled, -1, 0)


# --- tiny network ----------------------------------------------------------

def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    c_in, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], h, wd))
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oi,ihw->ohw", w[:, :, dy, dx],
                             xp[:, dy:dy + h, dx:dx + wd])
    return out + b[:, None, None]


def _pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _up2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _time_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


@dataclass
class MicrodiffConfig:
    size: int = 16
    latent_channels: int = 4
    channels: int = 8
    heads: int = 2
    head_dim: int = 8
    steps: int = 50
    total_t: int = 1000
    # strength of the control-branch injection; the real thing starts its
    # zero-convolutions at 0, which this scalar stands in for
    gate: float = 0.0
    weight_seed: int = 2024


class Microdiff:
    """Random-weight U-Net with a layout-hint control branch."""

    def __init__(self, cfg: MicrodiffConfig | None = None):
        self.cfg = cfg or MicrodiffConfig()
        c, lc = self.cfg.channels, self.cfg.latent_channels
        inner = self.cfg.heads * self.cfg.head_dim
        rng = SplitMix64(self.cfg.weight_seed)

        def draw(*shape):
            n = int(np.prod(shape))
            return np.array([rng.uniform(-0.1, 0.1) for _ in range(n)]).reshape(shape)

        self.in_w, self.in_b = draw(c, lc, 3, 3), draw(c)
        # residual blocks: down16, down8, mid4, up8, up16
        self.blocks = {
            name: {"w": draw(c, c, 3, 3), "b": draw(c),
                   "tw": draw(c, c), "tb": draw(c)}
            for name in ("down16", "down8", "mid", "up8", "up16")
        }
        # cross-attention sites on the down path and in the middle
        self.attn = {
            name: {"q": draw(inner, c), "k": draw(inner, c),
                   "v": draw(inner, c), "o": draw(c, inner)}
            for name in ("down16", "down8", "mid")
        }
        self.out_w, self.out_b = draw(lc, c, 3, 3), draw(lc)
        # the control branch copies the down-path weights; only its hint
        # encoder is new
        self.hint_w, self.hint_b = draw(c, 3, 3, 3), draw(c)

    # -- pieces ------------------------------------------------------------

    def _resblock(self, name: str, x: np.ndarray, temb: np.ndarray) -> np.ndarray:
        blk = self.blocks[name]
        tbias = blk["tw"] @ temb + blk["tb"]
        return x + np.tanh(_conv3x3(x, blk["w"], blk["b"]) + tbias[:, None, None])

    def _cross_attention(
        self,
        name: str,
        x: np.ndarray,
        text_emb: np.ndarray,
        layout: RegionLayout,
        alignment: TokenAlignment,
        control_cfg: ControlConfig,
        ctx: StepContext,
        branch: str,
        trace: list | None,
    ) -> np.ndarray:
        at = self.attn[name]
        c, h, w = x.shape
        hw = h * w
        tokens = x.reshape(c, hw).T  # (hw, c)
        heads, hd = self.cfg.heads, self.cfg.head_dim

        def split(m):
            return m.reshape(-1, heads, hd).transpose(1, 0, 2)

        q = split(tokens @ at["q"].T)
        k = split(text_emb @ at["k"].T)
        v = split(text_emb @ at["v"].T)
        logits = attention_logits(q, k)
        diag = ControlDiagnostics()
        probs = apply_control(logits, layout, alignment, control_cfg, ctx,
                              layer_h=h, layer_w=w, head_dim=hd,
                              diagnostics=diag)
        if trace is not None:
            sums = probs.sum(axis=-1)
            rec = {
                "t": ctx.t, "sigma": ctx.sigma, "branch": branch, "layer": name,
                "method": control_cfg.method,
                "row_sum_min": float(sums.min()),
                "row_sum_max": float(sums.max()),
            }
            if control_cfg.method == "ca_redist":
                rec.update({
                    "m_mean": float(np.mean(diag.m_means)),
                    "m_min": float(np.min(diag.m_means)),
                    "m_max": float(np.max(diag.m_means)),
                    "boost": diag.boost,
                    "no_local": diag.no_local,
                    "no_global": diag.no_global,
                })
            trace.append(rec)
        mixed = apply_values(probs, v)  # (heads, hw, hd)
        merged = mixed.transpose(1, 0, 2).reshape(hw, heads * hd)
        return x + (merged @ at["o"].T).T.reshape(c, h, w)

    # -- forward pass ------------------------------------------------------

    def predict_noise(
        self,
        latent: np.ndarray,
        t: int,
        text_emb: np.ndarray,
        layout: RegionLayout,
        alignment: TokenAlignment,
        control_cfg: ControlConfig,
        ctx: StepContext,
        hint: np.ndarray | None = None,
        trace: list | None = None,
    ) -> np.ndarray:
        cfg = self.cfg
        if latent.shape != (cfg.latent_channels, cfg.size, cfg.size):
            raise DimensionMismatch(
                f"latent {latent.shape}, expected "
                f"({cfg.latent_channels}, {cfg.size}, {cfg.size})"
            )
        temb = _time_embedding(t, cfg.channels)

        def down_path(x0, branch):
            d16 = self._resblock("down16", x0, temb)
            d16 = self._cross_attention("down16", d16, text_emb, layout,
                                        alignment, control_cfg, ctx, branch, trace)
            d8 = self._resblock("down8", _pool2(d16), temb)
            d8 = self._cross_attention("down8", d8, text_emb, layout,
                                       alignment, control_cfg, ctx, branch, trace)
            mid = self._resblock("mid", _pool2(d8), temb)
            mid = self._cross_attention("mid", mid, text_emb, layout,
                                        alignment, control_cfg, ctx, branch, trace)
            return d16, d8, mid

        feat = _conv3x3(latent, self.in_w, self.in_b)
        skip16, skip8, mid = down_path(feat, "main")

        # The control branch always runs when a hint is present, even at gate
        # zero — that the gated sum then changes nothing is a property worth
        # keeping observable, not a shortcut to hard-code.
        if hint is not None:
            ctrl_in = feat + _conv3x3(hint, self.hint_w, self.hint_b)
            c16, c8, cmid = down_path(ctrl_in, "control")
            skip16 = skip16 + cfg.gate * c16
            skip8 = skip8 + cfg.gate * c8
            mid = mid + cfg.gate * cmid

        u8 = self._resblock("up8", _up2(mid) + skip8, temb)
        u16 = self._resblock("up16", _up2(u8) + skip16, temb)
        return _conv3x3(u16, self.out_w, self.out_b)

    # -- sampling ----------------------------------------------------------

    def sample(
        self,
        text_emb: np.ndarray,
        layout: RegionLayout,
        alignment: TokenAlignment,
        control_cfg: ControlConfig | None = None,
        seed: int = 0,
        use_hint: bool = True,
        trace: list | None = None,
    ) -> np.ndarray:
        """Deterministic eta=0 sampling; returns the final latent."""
        cfg = self.cfg
        control_cfg = control_cfg or ControlConfig()
        ab = alpha_bar_schedule(cfg.total_t)
        rng = SplitMix64(seed)
        x = np.array([rng.gaussian()
                      for _ in range(cfg.latent_channels * cfg.size * cfg.size)])
        x = x.reshape(cfg.latent_channels, cfg.size, cfg.size)
        hint = hint_from_layout(layout, cfg.size) if use_hint else None

        for step, (t, t_prev) in enumerate(ddim_times(cfg.steps, cfg.total_t)):
            ctx = StepContext(t=t, total_steps=cfg.total_t, sigma=sigma_at(t, ab))
            eps = self.predict_noise(x, t, text_emb, layout, alignment,
                                     control_cfg, ctx, hint=hint, trace=trace)
            if not np.all(np.isfinite(eps)):
                raise NonFiniteLatent("noise prediction diverged", step=step)
            a_t, a_prev = ab[t], ab[t_prev]
            x0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
            x = math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps
            if not np.all(np.isfinite(x)):
                raise NonFiniteLatent("latent diverged", step=step)
        return x


def write_trace_jsonl(trace: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
