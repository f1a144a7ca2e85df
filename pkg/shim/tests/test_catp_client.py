"""The shim's client codec against the kernel's decoder and a live session."""

from pathlib import Path

import numpy as np
import pytest

from host_shim import KernelClient
from host_shim.catp import decode_response, encode_request
from host_shim.errors import ConnectionLost, ProtocolError

FIXTURE = Path(__file__).parent / "fixtures" / "catp_v1_basic.bin"


def fixture_reencoded() -> tuple[bytes, bytes]:
    """(frozen bytes, shim re-encoding of the same message)."""
    from attnctl import wire  # the kernel decoder is the contract oracle

    frozen = FIXTURE.read_bytes()
    req = wire.decode_request(frozen)
    ours = encode_request(
        req.logits, req.token_region, req.masks,
        d=req.d, layer_h=req.layer_h, layer_w=req.layer_w,
        t=req.t, total_t=req.total_t, sigma=req.sigma,
        method=req.method, w_prime=req.w_prime, w_m=req.w_m, w_a=req.w_a,
        t_thr=req.t_thr, softness=req.softness,
        masks_at_source=bool(req.flags & 1),
    )
    return frozen, ours


def test_encoder_agrees_with_frozen_fixture_bit_for_bit():
    frozen, ours = fixture_reencoded()
    assert ours == frozen


def test_encoded_requests_decode_with_the_kernel_decoder():
    from attnctl import wire

    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 6, 5))
    masks = (rng.random((2, 4, 4)) < 0.5).astype(np.float32)
    payload = encode_request(
        logits, np.array([0, 1, 2, 0, 1], np.uint16), masks,
        d=4, layer_h=2, layer_w=3, t=200, total_t=1000, sigma=0.7, method=1)
    req = wire.decode_request(payload)
    assert (req.heads, req.hw, req.n_tokens, req.d) == (3, 6, 5, 4)
    assert (req.layer_h, req.layer_w, req.mask_h, req.mask_w) == (2, 3, 4, 4)
    np.testing.assert_allclose(req.logits, logits.astype(np.float32))


def test_live_roundtrip_returns_probability_rows():
    with KernelClient() as client:
        reply = decode_response(client.call(FIXTURE.read_bytes()))
    assert reply.status == 0
    assert reply.probs.shape == (2, 4, 3)
    np.testing.assert_allclose(reply.probs.sum(axis=2), 1.0, atol=1e-5)
    assert reply.m_means.shape == (2,)


def test_kernel_answers_garbage_with_an_error_status():
    with KernelClient() as client:
        reply = decode_response(client.call(b"JUNKJUNKJUNK"))
    assert reply.status != 0
    assert reply.probs is None


def test_dead_kernel_raises_connection_lost():
    client = KernelClient()
    client._proc.kill()
    client._proc.wait()
    with pytest.raises(ConnectionLost):
        client.call(FIXTURE.read_bytes())


def test_decode_response_rejects_noise():
    with pytest.raises(ProtocolError):
        decode_response(b"\x00\x01")
    with pytest.raises(ProtocolError):
        decode_response(b"NOPE" + bytes(20))
