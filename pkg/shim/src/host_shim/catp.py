"""Client-side codec for the kernel's attention-control wire format.

Independently implemented from the protocol description (version 1,
little-endian, no padding, u32 length-prefixed frames):

    request  := "CATP" u16 version u16 flags
                u32 heads hw n_tokens d layer_h layer_w mask_h mask_w
                    n_regions t total_t
                f32 sigma, u8 method, f32 w_prime w_m w_a, u32 t_thr,
                f32 softness
                f32[heads*hw*n_tokens] logits
                u16[n_tokens] token_region
                f32[n_regions*mask_h*mask_w] masks
    response := "CATP" u16 version u8 status
                u32 heads hw n_tokens no_local no_global
                f32[heads] m_means, f32[heads*hw*n_tokens] probs

The kernel never reimplements on this side of the pipe: the shim only packs
tensors, ships them, and unpacks probabilities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError

MAGIC = b"CATP"
VERSION = 1
FLAG_MASKS_AT_SOURCE = 0x0001
T_THR_UNSET = 0xFFFFFFFF
SOFTNESS_UNSET = -1.0

METHOD_IDS = {
    "none": 0,
    "ediffi": 1,
    "cac": 2,
    "dense_diffusion": 3,
    "ca_redist": 4,
}

_REQ_HEAD = struct.Struct("<4sHH11IfBfffIf")
_RESP_HEAD = struct.Struct("<4sHB5I")


def encode_request(
    logits: np.ndarray,
    token_region: np.ndarray,
    masks: np.ndarray,
    *,
    d: int,
    layer_h: int,
    layer_w: int,
    t: int,
    total_t: int,
    sigma: float,
    method: int,
    w_prime: float = 0.5,
    w_m: float = 0.0,
    w_a: float = 0.0,
    t_thr: int = T_THR_UNSET,
    softness: float = SOFTNESS_UNSET,
    masks_at_source: bool = True,
) -> bytes:
    logits = np.ascontiguousarray(logits, dtype="<f4")
    token_region = np.ascontiguousarray(token_region, dtype="<u2")
    masks = np.ascontiguousarray(masks, dtype="<f4")
    heads, hw, n_tokens = logits.shape
    n_regions, mask_h, mask_w = masks.shape
    flags = FLAG_MASKS_AT_SOURCE if masks_at_source else 0
    head = _REQ_HEAD.pack(
        MAGIC, VERSION, flags,
        heads, hw, n_tokens, d, layer_h, layer_w, mask_h, mask_w,
        n_regions, t, total_t,
        float(sigma), method, float(w_prime), float(w_m), float(w_a),
        int(t_thr), float(softness),
    )
    return head + logits.tobytes() + token_region.tobytes() + masks.tobytes()


@dataclass(frozen=True)
class KernelReply:
    status: int
    no_local: int
    no_global: int
    m_means: np.ndarray | None
    probs: np.ndarray | None  # (heads, hw, n_tokens) float32, None on error


def decode_response(payload: bytes) -> KernelReply:
    if len(payload) < _RESP_HEAD.size:
        raise ProtocolError(f"response frame of {len(payload)} bytes is too short")
    magic, version, status, heads, hw, n_tokens, no_local, no_global = \
        _RESP_HEAD.unpack_from(payload)
    if magic != MAGIC:
        raise ProtocolError(f"response magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"response version {version}")
    if status != 0:
        return KernelReply(status, no_local, no_global, None, None)
    body = payload[_RESP_HEAD.size:]
    want = 4 * (heads + heads * hw * n_tokens)
    if len(body) != want:
        raise ProtocolError(f"response body {len(body)} bytes, expected {want}")
    m_means = np.frombuffer(body, dtype="<f4", count=heads)
    probs = np.frombuffer(body, dtype="<f4", offset=4 * heads).reshape(
        heads, hw, n_tokens)
    return KernelReply(status, no_local, no_global, m_means, probs)


def write_frame(stream, payload: bytes) -> None:
    stream.write(struct.pack("<I", len(payload)) + payload)


def read_frame(stream) -> bytes | None:
    """Next frame payload, or None on a clean or mid-frame EOF."""
    head = stream.read(4)
    if len(head) < 4:
        return None
    (length,) = struct.unpack("<I", head)
    payload = stream.read(length)
    if len(payload) < length:
        return None
    return payload
