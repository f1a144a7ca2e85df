"""CATP: a small binary protocol for remote attention control.

A host pipeline that wants the control kernel but lives in another process
(or another language) ships one message per cross-attention call: the scaled
logits, the token->region map and the region masks, plus the method and its
hyperparameters.  It gets back the finished probability rows and the
redistribution diagnostics.

Format, version 1 (everything little-endian, no padding):

    frame     := u32 byte_length, payload
    request   := "CATP" u16 version=1 u16 flags
                 u32 heads hw n_tokens d layer_h layer_w mask_h mask_w
                     n_regions t total_t
                 f32 sigma, u8 method, f32 w_prime w_m w_a, u32 t_thr,
                 f32 softness
                 f32[heads*hw*n_tokens] logits   (row-major)
                 u16[n_tokens]          token_region  (0 = no region)
                 f32[n_regions*mask_h*mask_w] masks
    response  := "CATP" u16 version=1 u8 status
                 u32 heads hw n_tokens no_local no_global
                 f32[heads] m_means
                 f32[heads*hw*n_tokens] probs

Conventions:

* flags bit 0: masks are at their source resolution and the kernel rescales
  them to layer_h x layer_w; unset means they already match the layer grid.
  All other flag bits must be zero.
* method: 0 none, 1 ediffi, 2 cac, 3 dense_diffusion, 4 ca_redist.
* t_thr = 0xFFFFFFFF and softness < 0 mean "use the default" (the sampler's
  step count and the boost-mode-dependent ramp softness, respectively).
* Error responses carry zeros in every count field and no array payload.

Floats travel as f32; the kernel computes in float64 and rounds the result
once at the end.  Requests are processed strictly in order, one response
per request; a malformed request produces an error response and leaves the
session open, while a short read (EOF mid-frame) closes it quietly.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .control import (
    METHODS,
    ControlConfig,
    ControlDiagnostics,
    StepContext,
    apply_control,
    default_softness,
)
from .errors import (
    BadHeader,
    BadMagic,
    LengthMismatch,
    NonFinitePayload,
    VersionUnsupported,
    WireError,
)
from .regions import RegionLayout, TokenAlignment

MAGIC = b"CATP"
VERSION = 1
FLAG_MASKS_AT_SOURCE = 0x0001
_KNOWN_FLAGS = FLAG_MASKS_AT_SOURCE
T_THR_UNSET = 0xFFFFFFFF

STATUS_OK = 0
STATUS_INTERNAL = 6

_REQ_HEAD = struct.Struct("<4sHH11IfBfffIf")
_RESP_HEAD = struct.Struct("<4sHB5I")


@dataclass(frozen=True, eq=False)
class WireRequest:
    heads: int
    hw: int
    n_tokens: int
    d: int
    layer_h: int
    layer_w: int
    mask_h: int
    mask_w: int
    n_regions: int
    t: int
    total_t: int
    sigma: float
    method: int
    w_prime: float
    w_m: float
    w_a: float
    t_thr: int
    softness: float
    flags: int
    logits: np.ndarray        # (heads, hw, n_tokens) float32
    token_region: np.ndarray  # (n_tokens,) uint16
    masks: np.ndarray         # (n_regions, mask_h, mask_w) float32


@dataclass(frozen=True, eq=False)
class WireResponse:
    status: int
    heads: int = 0
    hw: int = 0
    n_tokens: int = 0
    no_local: int = 0
    no_global: int = 0
    m_means: np.ndarray | None = None   # (heads,) float32
    probs: np.ndarray | None = None     # (heads, hw, n_tokens) float32


def make_request(
    logits: np.ndarray,
    token_region: np.ndarray,
    masks: np.ndarray,
    cfg: ControlConfig,
    ctx: StepContext,
    head_dim: int = 1,
    layer_h: int | None = None,
    layer_w: int | None = None,
    masks_at_source: bool = False,
) -> WireRequest:
    """Package arrays plus a ControlConfig/StepContext into a WireRequest."""
    logits = np.asarray(logits, dtype=np.float32)
    if logits.ndim != 3:
        raise BadHeader(f"logits must be (heads, pixels, tokens), got {logits.shape}")
    heads, hw, n = logits.shape
    if layer_h is None or layer_w is None:
        side = int(round(hw ** 0.5))
        if side * side != hw:
            raise BadHeader(f"pixel count {hw} is not square; pass layer_h/layer_w")
        layer_h = layer_w = side
    masks = np.asarray(masks, dtype=np.float32)
    if masks.ndim != 3:
        masks = masks.reshape((0, layer_h, layer_w)) if masks.size == 0 else masks
    if masks.ndim != 3:
        raise BadHeader(f"masks must be (regions, h, w), got {masks.shape}")
    return WireRequest(
        heads=heads, hw=hw, n_tokens=n, d=head_dim,
        layer_h=layer_h, layer_w=layer_w,
        mask_h=masks.shape[1], mask_w=masks.shape[2],
        n_regions=masks.shape[0],
        t=int(ctx.t), total_t=ctx.total_steps, sigma=float(ctx.sigma),
        method=METHODS.index(cfg.method),
        w_prime=cfg.w_prime, w_m=cfg.w_m, w_a=cfg.w_a,
        t_thr=T_THR_UNSET if cfg.t_thr is None else cfg.t_thr,
        softness=cfg.softness,
        flags=FLAG_MASKS_AT_SOURCE if masks_at_source else 0,
        logits=logits,
        token_region=np.asarray(token_region, dtype=np.uint16),
        masks=masks,
    )


def encode_request(req: WireRequest) -> bytes:
    head = _REQ_HEAD.pack(
        MAGIC, VERSION, req.flags,
        req.heads, req.hw, req.n_tokens, req.d,
        req.layer_h, req.layer_w, req.mask_h, req.mask_w,
        req.n_regions, req.t, req.total_t,
        req.sigma, req.method, req.w_prime, req.w_m, req.w_a,
        req.t_thr, req.softness,
    )
    logits = np.ascontiguousarray(req.logits, dtype=np.float32)
    token_region = np.ascontiguousarray(req.token_region, dtype=np.uint16)
    masks = np.ascontiguousarray(req.masks, dtype=np.float32)
    return b"".join([
        head,
        logits.astype("<f4", copy=False).tobytes(),
        token_region.astype("<u2", copy=False).tobytes(),
        masks.astype("<f4", copy=False).tobytes(),
    ])


def decode_request(payload: bytes) -> WireRequest:
    if len(payload) < 4:
        raise LengthMismatch("frame shorter than the protocol magic",
                             expected=_REQ_HEAD.size, actual=len(payload))
    if payload[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {payload[:4]!r}")
    if len(payload) < 8:
        raise LengthMismatch("frame truncated before the version field",
                             expected=_REQ_HEAD.size, actual=len(payload))
    (version,) = struct.unpack_from("<H", payload, 4)
    if version != VERSION:
        raise VersionUnsupported(f"version {version}; this kernel speaks {VERSION}")
    if len(payload) < _REQ_HEAD.size:
        raise LengthMismatch("frame truncated inside the header",
                             expected=_REQ_HEAD.size, actual=len(payload))
    (_, _, flags, heads, hw, n, d, layer_h, layer_w, mask_h, mask_w,
     n_regions, t, total_t, sigma, method, w_prime, w_m, w_a,
     t_thr, softness) = _REQ_HEAD.unpack_from(payload)

    if flags & ~_KNOWN_FLAGS:
        raise BadHeader(f"unknown flag bits 0x{flags & ~_KNOWN_FLAGS:04x}")
    if method >= len(METHODS):
        raise BadHeader(f"method code {method}; known 0..{len(METHODS) - 1}")
    for name, value in (("heads", heads), ("hw", hw), ("n_tokens", n),
                        ("d", d), ("layer_h", layer_h), ("layer_w", layer_w),
                        ("total_t", total_t)):
        if value == 0:
            raise BadHeader(f"{name} must be positive")
    if n_regions > 0 and (mask_h == 0 or mask_w == 0):
        raise BadHeader("mask grid has a zero dimension")
    if hw != layer_h * layer_w:
        raise BadHeader(f"hw {hw} != layer {layer_h}x{layer_w}")
    if n_regions > 0 and not flags & FLAG_MASKS_AT_SOURCE \
            and (mask_h, mask_w) != (layer_h, layer_w):
        raise BadHeader(
            f"masks {mask_h}x{mask_w} do not match layer {layer_h}x{layer_w} "
            "and the source-resolution flag is unset"
        )
    if t > total_t:
        raise BadHeader(f"step {t} beyond total {total_t}")
    for name, value in (("sigma", sigma), ("w_prime", w_prime),
                        ("w_m", w_m), ("w_a", w_a), ("softness", softness)):
        if not np.isfinite(value):
            raise NonFinitePayload(f"{name} is not finite")
    if sigma < 0 or w_prime < 0 or w_m < 0 or w_a < 0:
        raise BadHeader("sigma and control weights must be >= 0")
    if softness > 1.0:
        raise BadHeader(f"softness {softness} above 1")

    n_logit_bytes = 4 * heads * hw * n
    n_mask_bytes = 4 * n_regions * mask_h * mask_w
    expected = _REQ_HEAD.size + n_logit_bytes + 2 * n + n_mask_bytes
    if len(payload) != expected:
        raise LengthMismatch("payload does not match the header",
                             expected=expected, actual=len(payload))

    off = _REQ_HEAD.size
    logits = np.frombuffer(payload, dtype="<f4", count=heads * hw * n,
                           offset=off).reshape(heads, hw, n)
    off += n_logit_bytes
    token_region = np.frombuffer(payload, dtype="<u2", count=n, offset=off)
    off += 2 * n
    masks = np.frombuffer(payload, dtype="<f4", count=n_regions * mask_h * mask_w,
                          offset=off).reshape(n_regions, mask_h, mask_w)

    if not np.isfinite(logits).all():
        raise NonFinitePayload("logits contain NaN or infinity")
    if not np.isfinite(masks).all():
        raise NonFinitePayload("masks contain NaN or infinity")
    if token_region.size and int(token_region.max()) > n_regions:
        raise BadHeader(
            f"token region id {int(token_region.max())} exceeds n_regions {n_regions}"
        )
    return WireRequest(
        heads=heads, hw=hw, n_tokens=n, d=d,
        layer_h=layer_h, layer_w=layer_w, mask_h=mask_h, mask_w=mask_w,
        n_regions=n_regions, t=t, total_t=total_t, sigma=sigma,
        method=method, w_prime=w_prime, w_m=w_m, w_a=w_a,
        t_thr=t_thr, softness=softness, flags=flags,
        logits=logits, token_region=token_region, masks=masks,
    )


def encode_response(resp: WireResponse) -> bytes:
    head = _RESP_HEAD.pack(MAGIC, VERSION, resp.status, resp.heads, resp.hw,
                           resp.n_tokens, resp.no_local, resp.no_global)
    if resp.status != STATUS_OK:
        return head
    m_means = np.ascontiguousarray(resp.m_means, dtype="<f4")
    probs = np.ascontiguousarray(resp.probs, dtype="<f4")
    return head + m_means.tobytes() + probs.tobytes()


def decode_response(payload: bytes) -> WireResponse:
    if len(payload) < 4:
        raise LengthMismatch("response shorter than the protocol magic",
                             expected=_RESP_HEAD.size, actual=len(payload))
    if payload[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {payload[:4]!r}")
    (version,) = struct.unpack_from("<H", payload, 4)
    if version != VERSION:
        raise VersionUnsupported(f"version {version}; this client speaks {VERSION}")
    if len(payload) < _RESP_HEAD.size:
        raise LengthMismatch("response truncated inside the header",
                             expected=_RESP_HEAD.size, actual=len(payload))
    _, _, status, heads, hw, n, no_local, no_global = _RESP_HEAD.unpack_from(payload)
    if status != STATUS_OK:
        return WireResponse(status=status)
    expected = _RESP_HEAD.size + 4 * heads + 4 * heads * hw * n
    if len(payload) != expected:
        raise LengthMismatch("response payload does not match its header",
                             expected=expected, actual=len(payload))
    off = _RESP_HEAD.size
    m_means = np.frombuffer(payload, dtype="<f4", count=heads, offset=off)
    off += 4 * heads
    probs = np.frombuffer(payload, dtype="<f4", count=heads * hw * n,
                          offset=off).reshape(heads, hw, n)
    return WireResponse(status=STATUS_OK, heads=heads, hw=hw, n_tokens=n,
                        no_local=no_local, no_global=no_global,
                        m_means=m_means, probs=probs)


def config_from_request(req: WireRequest) -> ControlConfig:
    softness = req.softness if req.softness >= 0 \
        else default_softness(req.w_m, req.w_a)
    return ControlConfig(
        method=METHODS[req.method],
        w_prime=req.w_prime, w_m=req.w_m, w_a=req.w_a,
        t_thr=None if req.t_thr == T_THR_UNSET else req.t_thr,
        softness=softness,
    )


def handle_request(req: WireRequest) -> WireResponse:
    """Run the requested control method and package the result."""
    if req.n_regions:
        layout = RegionLayout(
            height=req.mask_h, width=req.mask_w,
            tags=tuple(f"r{i + 1}" for i in range(req.n_regions)),
            masks=req.masks.astype(np.float64),
            partitioning=False,
        )
    else:
        # No masks shipped: use one empty region that no token references —
        # invisible to every method, so each reduces to a plain softmax.
        layout = RegionLayout(
            height=req.layer_h, width=req.layer_w, tags=("r1",),
            masks=np.zeros((1, req.layer_h, req.layer_w)), partitioning=False,
        )
    alignment = TokenAlignment(req.token_region.astype(np.int64))
    cfg = config_from_request(req)
    ctx = StepContext(t=req.t, total_steps=req.total_t, sigma=req.sigma)
    diag = ControlDiagnostics()
    probs = apply_control(
        req.logits.astype(np.float64), layout, alignment, cfg, ctx,
        layer_h=req.layer_h, layer_w=req.layer_w, head_dim=req.d,
        diagnostics=diag,
    )
    m_means = diag.m_means if diag.m_means is not None \
        else np.zeros(req.heads, dtype=np.float64)
    return WireResponse(
        status=STATUS_OK, heads=req.heads, hw=req.hw, n_tokens=req.n_tokens,
        no_local=diag.no_local, no_global=diag.no_global,
        m_means=np.asarray(m_means, dtype=np.float32),
        probs=probs.astype(np.float32),
    )


# --- framing ---------------------------------------------------------------

def write_frame(stream, payload: bytes) -> None:
    stream.write(struct.pack("<I", len(payload)))
    stream.write(payload)
    stream.flush()


def read_frame(stream) -> bytes | None:
    """Next length-prefixed frame, or None on EOF / a short read."""
    head = stream.read(4)
    if head is None or len(head) < 4:
        return None
    (length,) = struct.unpack("<I", head)
    data = stream.read(length)
    if data is None or len(data) < length:
        return None
    return data


def serve(stream_in, stream_out) -> int:
    """Answer framed requests until the input ends; returns how many were
    answered.  Protocol violations produce error responses; everything else
    that goes wrong inside a request is reported as status 6."""
    answered = 0
    while True:
        frame = read_frame(stream_in)
        if frame is None:
            return answered
        try:
            resp = handle_request(decode_request(frame))
            out = encode_response(resp)
        except WireError as err:
            out = encode_response(WireResponse(status=err.status))
        except Exception:
            out = encode_response(WireResponse(status=STATUS_INTERNAL))
        write_frame(stream_out, out)
        answered += 1


def call(stream_out, stream_in, req: WireRequest) -> WireResponse:
    """One request/response exchange over a pair of framed streams."""
    write_frame(stream_out, encode_request(req))
    frame = read_frame(stream_in)
    if frame is None:
        raise LengthMismatch("connection closed before a response arrived")
    return decode_response(frame)


def roundtrip_local(req: WireRequest) -> WireResponse:
    """Encode, serve and decode entirely in memory (handy for tests and the
    single-shot CLI path)."""
    inp = io.BytesIO()
    write_frame(inp, encode_request(req))
    inp.seek(0)
    out = io.BytesIO()
    serve(inp, out)
    out.seek(0)
    frame = read_frame(out)
    if frame is None:
        raise LengthMismatch("serve produced no response")
    return decode_response(frame)
