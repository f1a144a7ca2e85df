"""Annotated-prompt handling on the host side.

Prompts carry ``{phrase: TAG}`` markup; the tag is whatever follows the last
colon inside the braces.  Parsing yields the plain text plus the character
range each tagged phrase occupies in it — the same contract the kernel's own
parser follows, reimplemented here because the host only ships region *ids*
over the wire and needs to compute them locally.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import PromptSyntaxError


@dataclass(frozen=True)
class TaggedSpan:
    start: int
    end: int
    tag: str


@dataclass(frozen=True)
class HostPrompt:
    raw: str
    text: str
    spans: tuple[TaggedSpan, ...]


def parse_annotated(raw: str) -> HostPrompt:
    plain: list[str] = []
    spans: list[TaggedSpan] = []
    open_at = -1
    buf: list[str] = []
    for pos, ch in enumerate(raw):
        if ch == "{":
            if open_at >= 0:
                raise PromptSyntaxError(f"nested '{{' at {pos}")
            open_at, buf = pos, []
        elif ch == "}":
            if open_at < 0:
                raise PromptSyntaxError(f"stray '}}' at {pos}")
            content = "".join(buf)
            cut = content.rfind(":")
            if cut < 0:
                raise PromptSyntaxError(f"span at {open_at} has no tag")
            text, tag = content[:cut].strip(), content[cut + 1:].strip()
            if not text or not tag:
                raise PromptSyntaxError(f"empty span part at {open_at}")
            start = sum(len(p) for p in plain)
            plain.append(text)
            spans.append(TaggedSpan(start, start + len(text), tag))
            open_at = -1
        elif open_at >= 0:
            buf.append(ch)
        else:
            plain.append(ch)
    if open_at >= 0:
        raise PromptSyntaxError(f"'{{' at {open_at} never closed")
    return HostPrompt(raw=raw, text="".join(plain), spans=tuple(spans))


def assign_regions(
    token_spans: list[tuple[int, int]],
    prompt: HostPrompt,
    tag_region: dict[str, int],
) -> list[int]:
    """Region id per token: the tagged phrase with the largest character
    overlap wins, earlier phrase on ties, 0 when nothing overlaps."""
    out = []
    ordered = sorted(prompt.spans, key=lambda s: s.start)
    for s, e in token_spans:
        best_ov, best = 0, 0
        for sp in ordered:
            ov = min(e, sp.end) - max(s, sp.start)
            if ov > best_ov:
                best_ov, best = ov, tag_region[sp.tag]
        out.append(best)
    return out
