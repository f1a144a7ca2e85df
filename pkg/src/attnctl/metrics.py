"""Region-level faithfulness scoring: did each region get its object?

The score of one generated image is computed from its layout: crop the image
to every region's mask, embed each crop and each region's text phrase with a
vision/language embedder, and read similarity logits off the crop x phrase
matrix.  Two numbers per region fall out of it — the raw diagonal logit, and
the probability of the region's own phrase after a row softmax over all
phrases in the image.  Region scores are averaged per image, collected into
an examples x seeds table, and reported as MEAN +/- STD (BEST).

The embedder is abstracted behind ``EmbeddingProvider``: a hash-seeded stub
ships here so every pipeline piece is testable without ML weights, and a
framed byte protocol (CEMB) lets a host process with a real model serve
embeddings over a stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyMask,
    EmptyTable,
    LengthMismatch,
    ProviderFailure,
    VersionUnsupported,
    WireError,
)
from .layout_io import read_ppm
from .regions import rescale_mask
from .rng import fnv1a64, unit_vector
from .simplescenes import load_dataset
from .wire import read_frame, write_frame

DEFAULT_LOGIT_SCALE = 100.0


class EmbeddingProvider:
    """Text and image embedders with a shared similarity temperature.

    Implementations return unit vectors (norm 1 within 1e-4) of one common
    dimension.
    """

    logit_scale: float = DEFAULT_LOGIT_SCALE

    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class StubEmbeddingProvider(EmbeddingProvider):
    """Deterministic hash-seeded unit vectors; no model, no weights.

    Similarities are meaningless noise, but every downstream computation —
    crops, logit matrices, softmax scores, table aggregation — is exercised
    end to end and is reproducible across runs and machines.
    """

    def __init__(self, dim: int = 32, logit_scale: float = DEFAULT_LOGIT_SCALE):
        if dim < 1:
            raise DimensionMismatch(f"embedding dim {dim} must be positive")
        self.dim = dim
        self.logit_scale = float(logit_scale)

    def embed_text(self, text: str) -> np.ndarray:
        return unit_vector(fnv1a64(b"text\x00" + text.encode("utf-8")), self.dim)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(image)
        tag = f"image\x00{arr.dtype.str}{arr.shape}".encode("ascii")
        return unit_vector(fnv1a64(tag + arr.tobytes()), self.dim)


def crop_to_mask(image: np.ndarray, mask: np.ndarray,
                 mask_background: bool = False) -> np.ndarray:
    """Crop ``image`` to the tight bounding box of ``mask`` > 0.5.

    With ``mask_background`` the pixels inside the box but outside the mask
    are zeroed as well — the stricter reading of "contains only the masked
    region"; the default keeps the plain box.
    """
    image = np.asarray(image)
    sel = np.asarray(mask, dtype=np.float64) > 0.5
    if sel.shape != image.shape[:2]:
        raise DimensionMismatch(
            f"mask {sel.shape} does not cover image {image.shape[:2]}")
    ys, xs = np.nonzero(sel)
    if ys.size == 0:
        raise EmptyMask("mask has no pixel above 0.5")
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    crop = image[y0:y1, x0:x1].copy()
    if mask_background:
        crop[~sel[y0:y1, x0:x1]] = 0
    return crop


def _checked_embedding(vec, what: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(v))
    if not np.isfinite(norm) or abs(norm - 1.0) > 1e-4:
        raise ProviderFailure(f"{what} embedding has norm {norm}, expected 1")
    return v


def local_clip_logits(
    provider: EmbeddingProvider,
    image: np.ndarray,
    masks,
    descriptions,
    mask_background: bool = False,
) -> np.ndarray:
    """(crops x descriptions) similarity logits for one image.

    Row i is the crop of region i, column j the embedded description of
    region j, scaled by the provider's logit_scale; entry [i][i] is region
    i's own score.
    """
    masks = list(masks)
    descriptions = list(descriptions)
    if len(masks) != len(descriptions):
        raise DimensionMismatch(
            f"{len(masks)} masks vs {len(descriptions)} descriptions")
    if not masks:
        raise EmptyTable("no localized regions to score")
    crops = [crop_to_mask(image, m, mask_background=mask_background)
             for m in masks]
    try:
        img_vecs = [_checked_embedding(provider.embed_image(c), "image")
                    for c in crops]
        txt_vecs = [_checked_embedding(provider.embed_text(t), "text")
                    for t in descriptions]
    except ProviderFailure:
        raise
    except Exception as err:
        raise ProviderFailure(f"embedding provider raised: {err!r}") from err
    return provider.logit_scale * (np.stack(img_vecs) @ np.stack(txt_vecs).T)


def local_clip_probs(logits: np.ndarray) -> np.ndarray:
    """Row softmax over descriptions; works on one row or a whole matrix."""
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def diagonal_scores(matrix: np.ndarray) -> np.ndarray:
    """Per-region own-description scores of a crops x descriptions matrix."""
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionMismatch(f"need a square matrix, got {arr.shape}")
    return np.diagonal(arr).copy()


@dataclass(frozen=True, eq=False)
class MetricTable:
    """Scalar scores laid out examples x seeds, plus direction metadata."""

    name: str
    values: np.ndarray
    higher_better: bool = True

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise EmptyTable(
                f"{self.name}: need a non-empty examples x seeds table, "
                f"got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n_examples(self) -> int:
        return self.values.shape[0]

    @property
    def n_seeds(self) -> int:
        return self.values.shape[1]


def aggregate_report(table: MetricTable, sample_std: bool = False):
    """(mean, std, best) summary of a table.

    Averaging over examples first gives one value per seed; ``mean``/``std``
    summarize those per-seed values (population std unless ``sample_std``).
    ``best`` averages each example's best seed — max or min depending on the
    metric's direction.
    """
    per_seed = table.values.mean(axis=0)
    mean = float(per_seed.mean())
    ddof = 1 if sample_std and table.n_seeds > 1 else 0
    std = float(per_seed.std(ddof=ddof))
    if table.higher_better:
        best = float(table.values.max(axis=1).mean())
    else:
        best = float(table.values.min(axis=1).mean())
    return mean, std, best


def format_report(tables, sample_std: bool = False) -> str:
    """One "name: MEAN +/- STD (BEST)" line per table."""
    lines = []
    for table in tables:
        mean, std, best = aggregate_report(table, sample_std=sample_std)
        lines.append(f"{table.name}: {mean:.4f} ± {std:.4f} ({best:.4f})")
    return "\n".join(lines)


def evaluate_image(
    provider: EmbeddingProvider,
    image: np.ndarray,
    masks,
    descriptions,
    mask_background: bool = False,
):
    """Mean own-region logit and own-description probability of one image."""
    logits = local_clip_logits(provider, image, masks, descriptions,
                               mask_background=mask_background)
    probs = local_clip_probs(logits)
    return float(diagonal_scores(logits).mean()), float(diagonal_scores(probs).mean())


def _region_descriptions(example):
    """Each region's phrase, in region-id order, from the annotated prompt."""
    parsed = example.parsed()
    by_tag = {}
    for span in parsed.spans:
        by_tag.setdefault(span.tag, parsed.text[span.start:span.end])
    out = []
    for tag in example.layout.tags:
        if tag in by_tag:
            out.append(by_tag[tag])
        else:
            out.append(None)
    return out


def evaluate_dataset(
    dataset_dir,
    images_dir,
    provider: EmbeddingProvider,
    mask_background: bool = False,
):
    """Score every (example, seed) image pair under ``images_dir``.

    The image tree mirrors the dataset tree — ``<template>/<index>/<seed>.ppm``
    — and every example must cover the same seeds (the table is rectangular).
    Returns ({name: MetricTable}, example keys, seeds).
    """
    examples = load_dataset(dataset_dir)
    if not examples:
        raise EmptyTable(f"no examples under {dataset_dir}")
    images_dir = Path(images_dir)

    seeds = None
    keys = []
    rows_logit = []
    rows_prob = []
    for ex in examples:
        img_dir = images_dir / ex.template / f"{ex.index:03d}"
        found = sorted(int(p.stem) for p in img_dir.glob("*.ppm")) \
            if img_dir.is_dir() else []
        if not found:
            raise EmptyTable(f"no images for {ex.template}/{ex.index:03d}")
        if seeds is None:
            seeds = found
        elif found != seeds:
            raise DimensionMismatch(
                f"{ex.template}/{ex.index:03d} covers seeds {found}, "
                f"others cover {seeds}")

        lay = ex.layout.rasterize()
        descriptions = _region_descriptions(ex)
        pairs = [(lay.masks[i], d)
                 for i, d in enumerate(descriptions) if d is not None]
        if not pairs:
            raise EmptyTable(f"{ex.template}/{ex.index:03d} has no described regions")

        row_logit = []
        row_prob = []
        for seed in seeds:
            image = read_ppm(img_dir / f"{seed}.ppm")
            h, w = image.shape[:2]
            masks = [m if m.shape == (h, w) else rescale_mask(m, h, w)
                     for m, _ in pairs]
            logit, prob = evaluate_image(
                provider, image, masks, [d for _, d in pairs],
                mask_background=mask_background)
            row_logit.append(logit)
            row_prob.append(prob)
        keys.append(f"{ex.template}/{ex.index:03d}")
        rows_logit.append(row_logit)
        rows_prob.append(row_prob)

    tables = {
        "local_clip_logit": MetricTable("local_clip_logit", np.array(rows_logit)),
        "local_clip_prob": MetricTable("local_clip_prob", np.array(rows_prob)),
    }
    return tables, keys, seeds


# --- CEMB: embeddings over a framed stream ---------------------------------
#
#   request  := "CEMB" u16 version=1 u8 kind
#               kind 0 (text):  u32 byte_len, utf-8 bytes
#               kind 1 (image): u32 h, u32 w, u32 channels, u8[h*w*channels]
#   response := "CEMB" u16 version=1 u8 status
#               status 0: u32 dim, f32 logit_scale, f32[dim]
#
# Same framing as CATP (u32 length prefix, little-endian, no padding).

EMB_MAGIC = b"CEMB"
EMB_VERSION = 1
EMB_TEXT = 0
EMB_IMAGE = 1

_EMB_HEAD = struct.Struct("<4sHB")
_EMB_OK = struct.Struct("<4sHBIf")


def encode_text_request(text: str) -> bytes:
    data = text.encode("utf-8")
    return _EMB_HEAD.pack(EMB_MAGIC, EMB_VERSION, EMB_TEXT) + \
        struct.pack("<I", len(data)) + data


def encode_image_request(image: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(image)
    if arr.dtype != np.uint8 or arr.ndim not in (2, 3):
        raise DimensionMismatch(
            f"wire images must be uint8 HxW or HxWxC, got {arr.dtype} {arr.shape}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    return _EMB_HEAD.pack(EMB_MAGIC, EMB_VERSION, EMB_IMAGE) + \
        struct.pack("<III", h, w, c) + arr.tobytes()


def decode_embed_request(payload: bytes):
    """('text', str) or ('image', uint8 array) from a CEMB request frame."""
    if len(payload) < 4 or payload[:4] != EMB_MAGIC:
        raise BadMagic(f"expected {EMB_MAGIC!r}")
    if len(payload) < _EMB_HEAD.size:
        raise LengthMismatch("CEMB frame truncated in the header",
                             expected=_EMB_HEAD.size, actual=len(payload))
    _, version, kind = _EMB_HEAD.unpack_from(payload)
    if version != EMB_VERSION:
        raise VersionUnsupported(f"CEMB version {version}")
    body = payload[_EMB_HEAD.size:]
    if kind == EMB_TEXT:
        if len(body) < 4:
            raise LengthMismatch("text request lost its length field",
                                 expected=4, actual=len(body))
        (n,) = struct.unpack_from("<I", body)
        if len(body) != 4 + n:
            raise LengthMismatch("text bytes do not match their length",
                                 expected=4 + n, actual=len(body))
        return "text", body[4:].decode("utf-8")
    if kind == EMB_IMAGE:
        if len(body) < 12:
            raise LengthMismatch("image request lost its dimensions",
                                 expected=12, actual=len(body))
        h, w, c = struct.unpack_from("<III", body)
        if len(body) != 12 + h * w * c:
            raise LengthMismatch("image bytes do not match their dimensions",
                                 expected=12 + h * w * c, actual=len(body))
        arr = np.frombuffer(body, dtype=np.uint8, count=h * w * c,
                            offset=12).reshape(h, w, c)
        return "image", arr
    raise BadMagic(f"unknown CEMB request kind {kind}")


def encode_embed_response(vec: np.ndarray, logit_scale: float) -> bytes:
    v = np.ascontiguousarray(vec, dtype="<f4").reshape(-1)
    return _EMB_OK.pack(EMB_MAGIC, EMB_VERSION, 0, v.size, logit_scale) + \
        v.tobytes()


def decode_embed_response(payload: bytes):
    """(vector, logit_scale) from a CEMB response frame."""
    if len(payload) < 4 or payload[:4] != EMB_MAGIC:
        raise ProviderFailure("embedding server answered with a foreign frame")
    if len(payload) < _EMB_HEAD.size:
        raise ProviderFailure("embedding response truncated")
    _, version, status = _EMB_HEAD.unpack_from(payload)
    if version != EMB_VERSION:
        raise ProviderFailure(f"embedding server speaks version {version}")
    if status != 0:
        raise ProviderFailure(f"embedding server reported status {status}")
    if len(payload) < _EMB_OK.size:
        raise ProviderFailure("embedding response truncated")
    _, _, _, dim, scale = _EMB_OK.unpack_from(payload)
    if len(payload) != _EMB_OK.size + 4 * dim:
        raise ProviderFailure("embedding payload does not match its dim")
    vec = np.frombuffer(payload, dtype="<f4", count=dim, offset=_EMB_OK.size)
    return vec.astype(np.float64), float(scale)


class WireEmbeddingProvider(EmbeddingProvider):
    """Client side of CEMB: embeddings computed by another process.

    ``stream_out``/``stream_in`` are the framed byte streams toward and from
    the server (typically a subprocess's stdin/stdout).  The logit scale is
    taken from the server's responses.
    """

    def __init__(self, stream_out, stream_in):
        self._out = stream_out
        self._in = stream_in
        self.logit_scale = DEFAULT_LOGIT_SCALE

    def _exchange(self, payload: bytes) -> np.ndarray:
        write_frame(self._out, payload)
        frame = read_frame(self._in)
        if frame is None:
            raise ProviderFailure("embedding server closed the stream")
        vec, scale = decode_embed_response(frame)
        self.logit_scale = scale
        return vec

    def embed_text(self, text: str) -> np.ndarray:
        return self._exchange(encode_text_request(text))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self._exchange(encode_image_request(image))


def serve_embeddings(stream_in, stream_out, provider: EmbeddingProvider) -> int:
    """Answer CEMB requests from ``provider`` until the input ends."""
    answered = 0
    while True:
        frame = read_frame(stream_in)
        if frame is None:
            return answered
        try:
            kind, value = decode_embed_request(frame)
            vec = provider.embed_text(value) if kind == "text" \
                else provider.embed_image(value)
            out = encode_embed_response(np.asarray(vec), provider.logit_scale)
        except WireError as err:
            out = _EMB_HEAD.pack(EMB_MAGIC, EMB_VERSION, err.status)
        except Exception:
            out = _EMB_HEAD.pack(EMB_MAGIC, EMB_VERSION, 6)
        write_frame(stream_out, out)
        answered += 1
