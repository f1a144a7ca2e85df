"""A miniature host diffusion pipeline with swappable cross-attention.

This plays the role of the "real" pipeline the shim attaches to: fixed random
weights, an 8x8 latent, a main branch plus a gated control branch, two
cross-attention layers per branch, DDIM-style updates.  Its only interesting
property is the hook: every cross-attention call goes through
``self.attention(site, logits, step)``, which by default computes a local
softmax and which ``host_shim.attach`` replaces with a wire round-trip.

Nothing in this module imports the kernel.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

SiteKey = tuple[str, int]  # ("main" | "control", layer index)
BRANCHES = ("main", "control")


@dataclass(frozen=True)
class StepInfo:
    t: int
    total_t: int
    sigma: float


@dataclass(frozen=True)
class SiteInfo:
    site: SiteKey
    heads: int
    head_dim: int
    layer_h: int
    layer_w: int


@dataclass(frozen=True)
class PipelineConfig:
    size: int = 8
    latent_channels: int = 4
    width: int = 16
    heads: int = 2
    head_dim: int = 8
    layers: int = 2
    steps: int = 6
    total_t: int = 1000
    text_dim: int = 16
    max_tokens: int = 64
    gate: float = 0.7
    weight_seed: int = 11


def _piece_vector(piece: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(piece.encode("utf-8")))
    return rng.normal(0.0, 1.0, size=dim)


class TinyPipeline:
    def __init__(self, cfg: PipelineConfig | None = None):
        self.cfg = cfg = cfg or PipelineConfig()
        rng = np.random.default_rng(cfg.weight_seed)
        hd = cfg.heads * cfg.head_dim

        def mat(rows, cols, scale=1.0):
            return rng.normal(0.0, scale / math.sqrt(rows), size=(rows, cols))

        self.w_in = mat(cfg.latent_channels, cfg.width)
        self.w_out = mat(cfg.width, cfg.latent_channels)
        self.w_time = mat(2, cfg.width)
        self.w_hint = mat(1, cfg.width)
        self.attn = {}
        for branch in BRANCHES:
            for layer in range(cfg.layers):
                self.attn[(branch, layer)] = (
                    mat(cfg.width, hd),        # query
                    mat(cfg.text_dim, hd),     # key
                    mat(cfg.text_dim, hd),     # value
                    mat(hd, cfg.width, 0.5),   # output
                )
        self.control_hint = np.zeros(cfg.size * cfg.size)

    # --- conditioning -----------------------------------------------------

    def encode_text(self, pieces: list[str]) -> np.ndarray:
        """(n, text_dim) token features: hashed piece vector + position."""
        dim = self.cfg.text_dim
        rows = []
        for i, piece in enumerate(pieces):
            pos = np.array([math.sin(i / 7.0), math.cos(i / 7.0)] * (dim // 2))
            rows.append(_piece_vector(piece, dim) + pos)
        return np.stack(rows)

    def set_control_hint(self, occupancy: np.ndarray) -> None:
        """Per-pixel layout occupancy feeding the control branch."""
        self.control_hint = np.asarray(occupancy, dtype=np.float64).reshape(-1)

    # --- noise schedule ---------------------------------------------------

    def alpha_bar(self, t: int) -> float:
        return 1.0 - 0.99 * (t / self.cfg.total_t)

    def sigma(self, t: int) -> float:
        ab = self.alpha_bar(t)
        return math.sqrt((1.0 - ab) / ab)

    # --- attention hook ---------------------------------------------------

    def attention(self, site: SiteKey, logits: np.ndarray,
                  step: StepInfo) -> np.ndarray:
        """Default local softmax over scaled logits; attach() swaps this."""
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def sites(self) -> list[SiteInfo]:
        return [SiteInfo(site, self.cfg.heads, self.cfg.head_dim,
                         self.cfg.size, self.cfg.size)
                for site in self.attn]

    # --- the network ------------------------------------------------------

    def _cross_attention(self, site: SiteKey, h: np.ndarray,
                         tokens: np.ndarray, step: StepInfo) -> np.ndarray:
        wq, wk, wv, wo = self.attn[site]
        cfg = self.cfg
        hw, n = h.shape[0], tokens.shape[0]

        def split(x, rows):
            return x.reshape(rows, cfg.heads, cfg.head_dim).transpose(1, 0, 2)

        q, k, v = split(h @ wq, hw), split(tokens @ wk, n), split(tokens @ wv, n)
        logits = q @ k.transpose(0, 2, 1) / math.sqrt(cfg.head_dim)
        probs = self.attention(site, logits, step)
        out = (np.asarray(probs, dtype=np.float64) @ v)
        return out.transpose(1, 0, 2).reshape(hw, cfg.heads * cfg.head_dim) @ wo

    def predict_eps(self, x: np.ndarray, t: int,
                    tokens: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        hw = cfg.size * cfg.size
        step = StepInfo(t=t, total_t=cfg.total_t, sigma=self.sigma(t))
        tv = np.array([math.sin(t / cfg.total_t * math.pi),
                       math.cos(t / cfg.total_t * math.pi)])
        h0 = x.reshape(cfg.latent_channels, hw).T @ self.w_in + tv @ self.w_time
        total = np.zeros_like(h0)
        for branch in BRANCHES:
            h = h0
            if branch == "control":
                h = h + self.control_hint[:, None] * self.w_hint
            for layer in range(cfg.layers):
                h = h + self._cross_attention((branch, layer), h, tokens, step)
            total = total + (cfg.gate if branch == "control" else 1.0) * h
        eps = np.tanh(total @ self.w_out)
        return eps.T.reshape(cfg.latent_channels, cfg.size, cfg.size)

    def generate(self, tokens: np.ndarray, seed: int = 0) -> np.ndarray:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        x = rng.normal(0.0, 1.0,
                       size=(cfg.latent_channels, cfg.size, cfg.size))
        ts = [round(cfg.total_t * i / cfg.steps)
              for i in range(cfg.steps, 0, -1)]
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps = self.predict_eps(x, t, tokens)
            ab_t, ab_prev = self.alpha_bar(t), self.alpha_bar(t_prev)
            x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
            x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        return x
