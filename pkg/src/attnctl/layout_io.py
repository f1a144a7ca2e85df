"""Reading and writing layout files.

Two on-disk forms exist:

* ``layout.json`` — the editable source of truth: canvas size plus an ordered
  list of regions, each with a tag and a shape description (see shapes.py).
  Region order is priority order for rasterization.
* ``masks.rle`` — rasterized binary masks, one run-length block per region,
  meant for quick loading without re-rasterizing.

There is also a tiny binary PPM (P6) writer used for the color-coded
segmentation previews the dataset generator emits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, UnknownTag, ZeroDimension
from .regions import RegionLayout
from .rng import SplitMix64
from .shapes import rasterize_shapes


@dataclass(frozen=True)
class LayoutSpec:
    """Parsed layout.json: shapes not yet rasterized.

    Keeping layouts in shape form until a pixel grid is actually needed is
    deliberate: a few hundred dataset entries sharing 8 layouts should not
    hold a few hundred full-resolution mask stacks alive.
    """

    height: int
    width: int
    tags: tuple[str, ...]
    shapes: tuple[dict, ...]
    partitioning: bool = True

    def rasterize(self) -> RegionLayout:
        masks = rasterize_shapes(self.height, self.width, list(self.shapes))
        return RegionLayout(
            height=self.height,
            width=self.width,
            tags=self.tags,
            masks=masks,
            partitioning=self.partitioning,
        )


def layout_spec_from_dict(doc: dict) -> LayoutSpec:
    try:
        height = int(doc["height"])
        width = int(doc["width"])
        regions = doc["regions"]
    except KeyError as exc:
        raise DimensionMismatch(f"layout json missing field {exc.args[0]!r}") from None
    if height <= 0 or width <= 0:
        raise ZeroDimension(f"layout canvas {height}x{width}")
    tags: list[str] = []
    shapes: list[dict] = []
    for i, reg in enumerate(regions):
        rid = int(reg["id"])
        if rid != i + 1:
            raise UnknownTag(f"region ids must run 1..n in order; entry {i} has id {rid}")
        tags.append(str(reg["tag"]))
        shapes.append(dict(reg["shape"]))
    return LayoutSpec(
        height=height,
        width=width,
        tags=tuple(tags),
        shapes=tuple(shapes),
        partitioning=bool(doc.get("partitioning", True)),
    )


def load_layout_spec(path: str | Path) -> LayoutSpec:
    with open(path, encoding="utf-8") as fh:
        return layout_spec_from_dict(json.load(fh))


def layout_spec_to_dict(spec: LayoutSpec) -> dict:
    return {
        "height": spec.height,
        "width": spec.width,
        "partitioning": spec.partitioning,
        "regions": [
            {"id": i + 1, "tag": tag, "shape": shape}
            for i, (tag, shape) in enumerate(zip(spec.tags, spec.shapes))
        ],
    }


def save_layout_spec(spec: LayoutSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(layout_spec_to_dict(spec), fh, indent=2)
        fh.write("\n")


# --- run-length masks ------------------------------------------------------

def encode_rle(mask: np.ndarray) -> list[int]:
    """Row-major run lengths of a binary mask, zeros first.

    Runs alternate 0-run, 1-run, 0-run, ...; the leading count is 0 when the
    mask starts with a one.  Sum of counts equals the pixel count.
    """
    flat = (np.asarray(mask).reshape(-1) > 0.5).astype(np.int8)
    if flat.size == 0:
        return []
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    counts = list(np.diff(bounds))
    if flat[0] == 1:
        counts.insert(0, 0)
    return [int(c) for c in counts]


def decode_rle(counts: list[int], height: int, width: int) -> np.ndarray:
    total = sum(counts)
    if total != height * width:
        raise DimensionMismatch(
            f"rle counts sum to {total}, grid has {height * width} pixels"
        )
    flat = np.zeros(height * width, dtype=np.float64)
    pos = 0
    val = 0.0
    for c in counts:
        if c:
            flat[pos : pos + c] = val
        pos += c
        val = 1.0 - val
    return flat.reshape(height, width)


def write_masks_rle(layout: RegionLayout, path: str | Path) -> None:
    lines: list[str] = []
    for r in range(layout.n_regions):
        lines.append(
            f"region {r + 1} {layout.tags[r]} {layout.height} {layout.width}"
        )
        lines.append(" ".join(str(c) for c in encode_rle(layout.masks[r])))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_masks_rle(path: str | Path, partitioning: bool = True) -> RegionLayout:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) % 2 != 0:
        raise DimensionMismatch("masks.rle must pair header and counts lines")
    tags: list[str] = []
    masks: list[np.ndarray] = []
    height = width = -1
    for i in range(0, len(lines), 2):
        head = lines[i].split()
        if len(head) != 5 or head[0] != "region":
            raise DimensionMismatch(f"bad masks.rle header: {lines[i]!r}")
        rid, tag, h, w = int(head[1]), head[2], int(head[3]), int(head[4])
        if rid != len(tags) + 1:
            raise UnknownTag(f"masks.rle region ids out of order at {rid}")
        if height < 0:
            height, width = h, w
        elif (h, w) != (height, width):
            raise DimensionMismatch("masks.rle regions disagree on grid size")
        counts = [int(tok) for tok in lines[i + 1].split()]
        tags.append(tag)
        masks.append(decode_rle(counts, h, w))
    if not tags:
        raise DimensionMismatch("masks.rle holds no regions")
    return RegionLayout(
        height=height,
        width=width,
        tags=tuple(tags),
        masks=np.stack(masks),
        partitioning=partitioning,
    )


# --- color-coded segmentation renderings -----------------------------------

def region_colors_from(rng: SplitMix64, n_regions: int) -> np.ndarray:
    """(n_regions + 1, 3) uint8 colors drawn from ``rng``; index 0 is the
    background.  Collisions are redrawn so every region is distinguishable."""
    seen: set[tuple[int, int, int]] = set()
    out: list[tuple[int, int, int]] = []
    while len(out) < n_regions + 1:
        c = (rng.randrange(256), rng.randrange(256), rng.randrange(256))
        if c in seen:
            continue
        seen.add(c)
        out.append(c)
    return np.array(out, dtype=np.uint8)


def region_colors(n_regions: int, seed: int) -> np.ndarray:
    return region_colors_from(SplitMix64(seed), n_regions)


def render_segmap(layout: RegionLayout, colors: np.ndarray) -> np.ndarray:
    """Color-coded (H, W, 3) uint8 rendering of a partitioning layout."""
    colors = np.asarray(colors, dtype=np.uint8)
    if colors.shape != (layout.n_regions + 1, 3):
        raise DimensionMismatch(
            f"need {layout.n_regions + 1} colors, got {colors.shape}"
        )
    index = np.zeros((layout.height, layout.width), dtype=np.int64)
    for r in range(layout.n_regions, 0, -1):
        index[layout.masks[r - 1] > 0.5] = r
    return colors[index]


# --- PPM preview -----------------------------------------------------------

def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) uint8 image as binary PPM (P6)."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise DimensionMismatch(f"ppm wants (H, W, 3) uint8, got {arr.shape} {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval as whitespace-separated tokens
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DimensionMismatch(f"not a P6 ppm: magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DimensionMismatch(f"ppm maxval {maxval} unsupported")
    pos += 1  # exactly one whitespace byte after maxval
    body = data[pos : pos + h * w * 3]
    if len(body) != h * w * 3:
        raise DimensionMismatch("ppm body truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
