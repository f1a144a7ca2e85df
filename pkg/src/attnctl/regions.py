"""Region-annotated prompts and spatial region layouts.

A prompt may carry inline region annotations: ``"a {red ball: BALL} on {grass:
GROUND}"``.  Parsing strips the markup, records which character ranges of the
plain prompt belong to which region tag, and a separate alignment step maps
tokenizer spans onto region ids.  Region ids are 1-based; id 0 is reserved for
"no region" (background / unannotated text).

Layouts hold one soft mask per region over a pixel grid, plus the tag names.
Masks can be resampled to any attention-layer resolution with bilinear
filtering; resampled layouts are cached per resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyTag,
    NestedSpan,
    TokenSpanOutOfBounds,
    UnbalancedBraces,
    UnknownTag,
    ZeroDimension,
)


@dataclass(frozen=True)
class PromptSpan:
    """A character range of the plain prompt assigned to a region tag."""

    start: int
    end: int
    tag: str


@dataclass(frozen=True)
class AnnotatedPrompt:
    raw: str
    text: str
    spans: tuple[PromptSpan, ...]

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(s.tag for s in self.spans)


def parse_annotated_prompt(raw: str) -> AnnotatedPrompt:
    """Parse ``{text: TAG}`` annotations out of a prompt string.

    The tag is everything after the *last* colon inside the braces, so span
    text may itself contain colons.  Raises with the character position on
    malformed input: unbalanced braces, nested spans, or an empty tag/text.
    """
    plain: list[str] = []
    spans: list[PromptSpan] = []
    pos = 0
    open_at = -1  # raw index of the current '{', or -1
    buf: list[str] = []
    while pos < len(raw):
        ch = raw[pos]
        if ch == "{":
            if open_at >= 0:
                raise NestedSpan("span opened inside another span", pos)
            open_at = pos
            buf = []
        elif ch == "}":
            if open_at < 0:
                raise UnbalancedBraces("'}' without matching '{'", pos)
            content = "".join(buf)
            cut = content.rfind(":")
            if cut < 0:
                raise EmptyTag("span has no ': TAG' part", open_at)
            text = content[:cut].strip()
            tag = content[cut + 1 :].strip()
            if not tag:
                raise EmptyTag("span tag is empty", open_at)
            if not text:
                raise EmptyTag("span text is empty", open_at)
            start = sum(len(p) for p in plain)
            plain.append(text)
            spans.append(PromptSpan(start, start + len(text), tag))
            open_at = -1
        elif open_at >= 0:
            buf.append(ch)
        else:
            plain.append(ch)
        pos += 1
    if open_at >= 0:
        raise UnbalancedBraces("'{' never closed", open_at)
    return AnnotatedPrompt(raw=raw, text="".join(plain), spans=tuple(spans))


def whitespace_token_spans(text: str) -> list[tuple[int, int]]:
    """(start, end) ranges of whitespace-separated words; a stand-in tokenizer."""
    out: list[tuple[int, int]] = []
    i = 0
    while i < len(text):
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < len(text) and not text[j].isspace():
            j += 1
        out.append((i, j))
        i = j
    return out


@dataclass(frozen=True, eq=False)
class RegionLayout:
    """Per-region soft masks over an H x W grid.

    ``masks[r - 1]`` is the mask of region id ``r``; values live in [0, 1].
    With ``partitioning`` set, region masks may not overlap (pixelwise sum
    <= 1) and the background is whatever they leave uncovered.
    """

    height: int
    width: int
    tags: tuple[str, ...]
    masks: np.ndarray  # (n_regions, height, width) float64
    partitioning: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ZeroDimension(f"layout grid {self.height}x{self.width}")
        if len(self.tags) == 0:
            raise ZeroDimension("layout needs at least one region")
        if len(set(self.tags)) != len(self.tags):
            raise UnknownTag(f"duplicate region tags: {self.tags}")
        m = np.asarray(self.masks, dtype=np.float64)
        if m.shape != (len(self.tags), self.height, self.width):
            raise DimensionMismatch(
                f"masks shape {m.shape}, expected "
                f"({len(self.tags)}, {self.height}, {self.width})"
            )
        if not np.all(np.isfinite(m)):
            raise DimensionMismatch("masks contain non-finite values")
        if m.min() < -1e-9 or m.max() > 1.0 + 1e-9:
            raise DimensionMismatch(
                f"mask values outside [0, 1]: min={m.min()}, max={m.max()}"
            )
        m = np.clip(m, 0.0, 1.0)
        if self.partitioning and m.sum(axis=0).max() > 1.0 + 1e-6:
            raise DimensionMismatch("partitioning layout has overlapping regions")
        m.setflags(write=False)
        object.__setattr__(self, "masks", m)

    @property
    def n_regions(self) -> int:
        return len(self.tags)

    def region_for_tag(self, tag: str) -> int:
        try:
            return self.tags.index(tag) + 1
        except ValueError:
            raise UnknownTag(f"tag {tag!r} not in layout (have {self.tags})") from None

    def mask_for_region(self, region: int) -> np.ndarray:
        """Mask of a region id; id 0 yields the background remainder."""
        if region == 0:
            bg = 1.0 - self.masks.sum(axis=0)
            return np.clip(bg, 0.0, 1.0)
        if not 1 <= region <= self.n_regions:
            raise UnknownTag(f"region id {region} out of range 1..{self.n_regions}")
        return self.masks[region - 1]

    def area_fractions(self) -> np.ndarray:
        """Fraction of pixels each region covers (mask > 0.5), indexed by id.

        Entry 0 is the no-region slot and is defined as 1.0: tokens without a
        region are treated as referring to the whole canvas.
        """
        total = float(self.height * self.width)
        frac = np.empty(self.n_regions + 1, dtype=np.float64)
        frac[0] = 1.0
        for r in range(self.n_regions):
            frac[r + 1] = float(np.count_nonzero(self.masks[r] > 0.5)) / total
        return frac

    def at_resolution(self, h: int, w: int) -> "RegionLayout":
        """This layout resampled to ``h x w`` (bilinear); cached per size."""
        if (h, w) == (self.height, self.width):
            return self
        key = (h, w)
        hit = self._cache.get(key)
        if hit is None:
            ms = np.stack([rescale_mask(m, h, w) for m in self.masks])
            hit = RegionLayout(
                height=h, width=w, tags=self.tags, masks=ms,
                partitioning=self.partitioning,
            )
            self._cache[key] = hit
        return hit


def rescale_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a 2-D mask onto an ``out_h x out_w`` grid.

    Samples at pixel centers (the align-corners=False convention): output
    pixel (i, j) reads source coordinate ((i + 0.5) * H / out_h - 0.5,
    (j + 0.5) * W / out_w - 0.5), with edge clamping.  Values are clipped back
    to [0, 1] to stamp out float noise.
    """
    if out_h <= 0 or out_w <= 0:
        raise ZeroDimension(f"rescale target {out_h}x{out_w}")
    src = np.asarray(mask, dtype=np.float64)
    if src.ndim != 2:
        raise DimensionMismatch(f"rescale_mask wants 2-D input, got shape {src.shape}")
    h, w = src.shape
    if (out_h, out_w) == (h, w):
        return src.copy()

    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0  # weights from the unclamped position
    wx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)

    top = src[y0c[:, None], x0c] * (1 - wx) + src[y0c[:, None], x1c] * wx
    bot = src[y1c[:, None], x0c] * (1 - wx) + src[y1c[:, None], x1c] * wx
    out = top * (1 - wy[:, None]) + bot * (wy[:, None])
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class TokenAlignment:
    """Which region id each prompt token refers to (0 = none)."""

    token_region: np.ndarray  # (n_tokens,) int64

    def __post_init__(self):
        tr = np.asarray(self.token_region, dtype=np.int64)
        if tr.ndim != 1:
            raise DimensionMismatch(f"token_region must be 1-D, got {tr.shape}")
        if tr.size and tr.min() < 0:
            raise UnknownTag("negative region id in alignment")
        tr.setflags(write=False)
        object.__setattr__(self, "token_region", tr)

    @property
    def n_tokens(self) -> int:
        return int(self.token_region.size)

    def region_token_mask(self) -> np.ndarray:
        """Boolean (n_tokens,): True where the token names some region."""
        return np.asarray(self.token_region) > 0


def build_alignment(
    prompt: AnnotatedPrompt,
    token_spans: list[tuple[int, int]],
    layout: RegionLayout,
) -> TokenAlignment:
    """Map tokenizer spans onto layout region ids.

    A token belongs to a prompt span when their character ranges overlap by at
    least one character.  If several spans overlap the token, the largest
    overlap wins; on a tie, the span that starts earlier does.  Tokens
    touching no span get region 0.
    """
    n = len(prompt.text)
    regions = np.zeros(len(token_spans), dtype=np.int64)
    for i, (s, e) in enumerate(token_spans):
        if s < 0 or e > n or s >= e:
            raise TokenSpanOutOfBounds(
                f"token span ({s}, {e}) invalid for text of length {n}"
            )
        best_ov = 0
        best_span: PromptSpan | None = None
        for sp in sorted(prompt.spans, key=lambda p: p.start):
            ov = min(e, sp.end) - max(s, sp.start)
            if ov > best_ov:
                best_ov = ov
                best_span = sp
        if best_span is not None:
            regions[i] = layout.region_for_tag(best_span.tag)
    return TokenAlignment(token_region=regions)


def alignment_from_tags(tags_per_token: list[str | None], layout: RegionLayout) -> TokenAlignment:
    """Alignment from an explicit per-token tag list (None = no region)."""
    regions = np.zeros(len(tags_per_token), dtype=np.int64)
    for i, tag in enumerate(tags_per_token):
        if tag is not None:
            regions[i] = layout.region_for_tag(tag)
    return TokenAlignment(token_region=regions)
