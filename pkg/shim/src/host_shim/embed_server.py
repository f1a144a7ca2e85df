"""Serve embeddings to the evaluator over framed stdio.

Speaks the evaluator's embedding exchange (version 1, little-endian, u32
length-prefixed frames, same framing as the attention protocol):

    request  := "CEMB" u16 version=1 u8 kind
                kind 0 (text):  u32 byte_len, utf-8 bytes
                kind 1 (image): u32 h, u32 w, u32 channels, u8[h*w*channels]
    response := "CEMB" u16 version=1 u8 status
                status 0: u32 dim, f32 logit_scale, f32[dim]

Run as ``python -m host_shim.embed_server --model test-card/v1`` and point
``attnctl eval --provider wire --provider-cmd`` at it.
"""

from __future__ import annotations

import argparse
import struct
import sys

import numpy as np

from .catp import read_frame, write_frame
from .embeddings import ModelUnavailable, real_embedding_provider

MAGIC = b"CEMB"
VERSION = 1
KIND_TEXT = 0
KIND_IMAGE = 1

_HEAD = struct.Struct("<4sHB")
_OK = struct.Struct("<4sHBIf")

STATUS_MALFORMED = 1
STATUS_VERSION = 2
STATUS_INTERNAL = 6


def _decode(payload: bytes):
    if len(payload) < _HEAD.size or payload[:4] != MAGIC:
        return STATUS_MALFORMED, None
    _, version, kind = _HEAD.unpack_from(payload)
    if version != VERSION:
        return STATUS_VERSION, None
    body = payload[_HEAD.size:]
    if kind == KIND_TEXT:
        if len(body) < 4:
            return STATUS_MALFORMED, None
        (n,) = struct.unpack_from("<I", body)
        if len(body) != 4 + n:
            return STATUS_MALFORMED, None
        return 0, ("text", body[4:].decode("utf-8", errors="replace"))
    if kind == KIND_IMAGE:
        if len(body) < 12:
            return STATUS_MALFORMED, None
        h, w, c = struct.unpack_from("<3I", body)
        if len(body) != 12 + h * w * c:
            return STATUS_MALFORMED, None
        img = np.frombuffer(body, dtype=np.uint8, offset=12).reshape(h, w, c)
        return 0, ("image", img)
    return STATUS_MALFORMED, None


def serve(stream_in, stream_out, provider) -> int:
    answered = 0
    while (payload := read_frame(stream_in)) is not None:
        status, decoded = _decode(payload)
        if status == 0:
            try:
                kind, value = decoded
                vec = (provider.embed_text(value) if kind == "text"
                       else provider.embed_image(value))
                vec = np.asarray(vec, dtype="<f4").reshape(-1)
                frame = _OK.pack(MAGIC, VERSION, 0, vec.size,
                                 float(provider.logit_scale)) + vec.tobytes()
            except Exception:
                frame = _HEAD.pack(MAGIC, VERSION, STATUS_INTERNAL)
        else:
            frame = _HEAD.pack(MAGIC, VERSION, status)
        write_frame(stream_out, frame)
        stream_out.flush()
        answered += 1
    return answered


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="host_shim.embed_server")
    parser.add_argument("--model", default="test-card/v1",
                        help="embedding model id (default test-card/v1)")
    args = parser.parse_args(argv)
    try:
        provider = real_embedding_provider(args.model)
    except ModelUnavailable as exc:
        print(f"embed_server: {exc}", file=sys.stderr)
        return 3
    serve(sys.stdin.buffer, sys.stdout.buffer, provider)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
