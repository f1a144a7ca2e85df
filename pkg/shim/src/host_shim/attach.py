"""Route a pipeline's cross-attention through the kernel.

``attach`` parses the annotated prompt, tokenizes it, assigns a region id to
every token by character overlap, and replaces the pipeline's attention hook
with a wire round-trip: scaled logits out, probability rows back, one request
per attention call on both the main and the control branch.  Masks travel at
their source resolution; the kernel does any rescaling.

The returned handle keeps a per-call record (status, fallback counters,
per-head mixing means, and — when masks are binary at the layer resolution —
the attention mass landing on region tokens outside their own mask), plus the
raw request bytes so a session can be replayed verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import catp
from .client import KernelClient
from .errors import KernelStatusError, PromptSyntaxError, TokenBudgetExceeded
from .pipeline import SiteInfo, SiteKey, StepInfo, TinyPipeline
from .prompts import assign_regions, parse_annotated
from .tokenizer import map_token_spans, tokenize


@dataclass(frozen=True)
class ControlSettings:
    method: str = "none"
    w_prime: float = 0.5
    w_m: float = 0.0
    w_a: float = 0.0
    t_thr: int | None = None
    softness: float | None = None

    def wire_fields(self) -> dict:
        return {
            "method": catp.METHOD_IDS[self.method],
            "w_prime": self.w_prime,
            "w_m": self.w_m,
            "w_a": self.w_a,
            "t_thr": catp.T_THR_UNSET if self.t_thr is None else self.t_thr,
            "softness": (catp.SOFTNESS_UNSET if self.softness is None
                         else self.softness),
        }


@dataclass(frozen=True)
class HostLayout:
    tags: tuple[str, ...]
    masks: np.ndarray  # (n_regions, H, W), values in [0, 1]

    def occupancy(self) -> np.ndarray:
        return self.masks.max(axis=0)

    def hint(self, h: int, w: int) -> np.ndarray:
        """Occupancy at the pipeline's latent grid, for set_control_hint."""
        occ = self.occupancy()
        return occ if occ.shape == (h, w) else _nearest_resize(occ, h, w)


@dataclass(frozen=True)
class ProcessorBinding:
    site: SiteInfo
    client: KernelClient


@dataclass
class SiteRecord:
    branch: str
    layer: int
    t: int
    status: int
    no_local: int
    no_global: int
    m_means: tuple[float, ...]
    wrong_region_mass: float  # nan when masks are soft or at another grid


def _nearest_resize(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = plane.shape
    ys = (np.arange(h) * sh) // h
    xs = (np.arange(w) * sw) // w
    return plane[np.ix_(ys, xs)]


class BoundPipeline:
    """A pipeline whose attention calls go over the wire until detached."""

    def __init__(self, pipeline: TinyPipeline, settings: ControlSettings,
                 layout: HostLayout, annotated_prompt: str,
                 client: KernelClient | None = None):
        cfg = pipeline.cfg
        prompt = parse_annotated(annotated_prompt)
        missing = {s.tag for s in prompt.spans} - set(layout.tags)
        if missing:
            raise PromptSyntaxError(
                f"prompt tags {sorted(missing)} not present in the layout")
        pieces = tokenize(prompt.text)
        if len(pieces) > cfg.max_tokens:
            raise TokenBudgetExceeded(
                f"{len(pieces)} tokens > budget {cfg.max_tokens}")
        spans = map_token_spans(pieces, prompt.text)
        tag_region = {tag: i + 1 for i, tag in enumerate(layout.tags)}
        self.token_region = np.array(
            assign_regions(spans, prompt, tag_region), dtype=np.uint16)
        self.tokens = pipeline.encode_text(pieces)
        self.pieces = pieces

        self.pipeline = pipeline
        self.settings = settings
        self.layout = layout
        self.client = client or KernelClient()
        self._owns_client = client is None
        self.records: list[SiteRecord] = []
        self.request_log: list[bytes] = []
        self.response_log: list[bytes] = []
        self.bindings = [ProcessorBinding(info, self.client)
                         for info in pipeline.sites()]

        self._saved_attention = pipeline.attention
        pipeline.attention = self._wire_attention  # type: ignore[assignment]

    # --- the swapped-in hook ---------------------------------------------

    def _wire_attention(self, site: SiteKey, logits: np.ndarray,
                        step: StepInfo) -> np.ndarray:
        info = next(b.site for b in self.bindings if b.site.site == site)
        heads, hw, n = logits.shape
        assert hw == info.layer_h * info.layer_w, (site, logits.shape)
        payload = catp.encode_request(
            logits, self.token_region, self.layout.masks,
            d=info.head_dim, layer_h=info.layer_h, layer_w=info.layer_w,
            t=step.t, total_t=step.total_t, sigma=step.sigma,
            **self.settings.wire_fields(),
        )
        self.request_log.append(payload)
        raw = self.client.call(payload)
        self.response_log.append(raw)
        reply = catp.decode_response(raw)
        if reply.status != 0:
            raise KernelStatusError(reply.status,
                                    f"site {site} at t={step.t}")
        self.records.append(SiteRecord(
            branch=site[0], layer=site[1], t=step.t, status=reply.status,
            no_local=reply.no_local, no_global=reply.no_global,
            m_means=tuple(float(v) for v in reply.m_means),
            wrong_region_mass=self._wrong_region_mass(reply.probs, info),
        ))
        return reply.probs

    def _wrong_region_mass(self, probs: np.ndarray, info: SiteInfo) -> float:
        masks = self.layout.masks
        binary = np.isin(masks, (0.0, 1.0)).all()
        if not binary or masks.shape[1:] != (info.layer_h, info.layer_w):
            return float("nan")
        flat = masks.reshape(masks.shape[0], -1)  # (R, hw)
        wrong = np.zeros((flat.shape[1], len(self.token_region)))
        for i, r in enumerate(self.token_region):
            if r > 0:
                wrong[:, i] = flat[r - 1] == 0.0
        return float((probs * wrong[None]).sum(axis=2).max())

    # --- lifecycle --------------------------------------------------------

    def generate(self, seed: int = 0) -> np.ndarray:
        return self.pipeline.generate(self.tokens, seed=seed)

    def detach(self) -> None:
        self.pipeline.attention = self._saved_attention  # type: ignore
        if self._owns_client:
            self.client.close()

    def __enter__(self) -> "BoundPipeline":
        return self

    def __exit__(self, *exc) -> None:
        self.detach()


def attach(pipeline: TinyPipeline, control_config: ControlSettings,
           layout: HostLayout, annotated_prompt: str,
           client: KernelClient | None = None) -> BoundPipeline:
    return BoundPipeline(pipeline, control_config, layout, annotated_prompt,
                         client=client)
