import hashlib
import io
import struct
from pathlib import Path

import numpy as np
import pytest

import oracles
from attnctl import wire
from attnctl.control import ControlConfig, StepContext
from attnctl.errors import (
    BadHeader,
    BadMagic,
    LengthMismatch,
    NonFinitePayload,
    VersionUnsupported,
)
from attnctl.rng import SplitMix64

FIXTURE = Path(__file__).parent / "fixtures" / "catp_v1_basic.bin"
FIXTURE_SHA = "c416053fef51a8d6bc54518acd011b5ad4e470d961a1b51c4f47c8e0ddb5212c"


def random_request(rng: SplitMix64) -> wire.WireRequest:
    heads = 1 + rng.randrange(3)
    lh = 1 + rng.randrange(4)
    lw = 1 + rng.randrange(4)
    n = 1 + rng.randrange(6)
    n_regions = rng.randrange(3)
    hw = lh * lw
    logits = np.array([rng.uniform(-5, 5) for _ in range(heads * hw * n)],
                      np.float32).reshape(heads, hw, n)
    token_region = np.array([rng.randrange(n_regions + 1) for _ in range(n)],
                            np.uint16)
    at_source = n_regions > 0 and rng.randrange(2) == 1
    mh, mw = (1 + rng.randrange(8), 1 + rng.randrange(8)) if at_source else (lh, lw)
    masks = np.array([rng.uniform(0, 1) for _ in range(n_regions * mh * mw)],
                     np.float32).reshape(n_regions, mh, mw)
    method = rng.randrange(5)
    return wire.WireRequest(
        heads=heads, hw=hw, n_tokens=n, d=1 + rng.randrange(16),
        layer_h=lh, layer_w=lw, mask_h=mh, mask_w=mw, n_regions=n_regions,
        t=rng.randrange(1001), total_t=1000,
        sigma=np.float32(rng.uniform(0, 20)),
        method=method,
        w_prime=np.float32(rng.uniform(0, 2)),
        w_m=np.float32(rng.uniform(0, 1)),
        w_a=np.float32(rng.uniform(0, 1)),
        t_thr=wire.T_THR_UNSET if rng.randrange(2) else rng.randrange(1000),
        softness=np.float32(rng.uniform(0, 1)),
        flags=wire.FLAG_MASKS_AT_SOURCE if at_source else 0,
        logits=logits, token_region=token_region, masks=masks,
    )


def test_golden_fixture_decodes_to_documented_header():
    blob = FIXTURE.read_bytes()
    assert hashlib.sha256(blob).hexdigest() == FIXTURE_SHA
    req = wire.decode_request(blob)
    assert (req.heads, req.hw, req.n_tokens, req.d) == (2, 4, 3, 8)
    assert (req.layer_h, req.layer_w) == (2, 2)
    assert (req.mask_h, req.mask_w, req.n_regions) == (4, 4, 2)
    assert (req.t, req.total_t) == (500, 1000)
    assert req.sigma == 1.5
    assert req.method == 4
    assert (req.w_prime, req.w_m, req.w_a) == (0.5, 0.25, 0.125)
    assert (req.t_thr, req.softness) == (600, 0.75)
    assert req.flags == wire.FLAG_MASKS_AT_SOURCE
    np.testing.assert_array_equal(req.token_region, [0, 1, 2])
    assert req.masks[0, :, :2].min() == 1.0 and req.masks[0, :, 2:].max() == 0.0
    # the encoder still produces the frozen bytes
    assert wire.encode_request(req) == blob


def test_golden_fixture_is_served():
    resp = wire.roundtrip_local(wire.decode_request(FIXTURE.read_bytes()))
    assert resp.status == wire.STATUS_OK
    assert resp.probs.shape == (2, 4, 3)
    np.testing.assert_allclose(resp.probs.sum(axis=-1), 1.0, atol=1e-5)


def test_minimal_request_roundtrip():
    req = wire.make_request(
        np.zeros((1, 1, 1), np.float32), np.zeros(1, np.uint16),
        np.zeros((0, 1, 1), np.float32),
        ControlConfig(), StepContext(t=0, total_steps=1),
    )
    blob = wire.encode_request(req)
    assert wire.encode_request(wire.decode_request(blob)) == blob
    resp = wire.roundtrip_local(req)
    assert resp.status == 0 and resp.probs[0, 0, 0] == 1.0


def test_random_requests_roundtrip_bit_exactly():
    rng = SplitMix64(2024)
    for _ in range(200):
        blob = wire.encode_request(random_request(rng))
        again = wire.encode_request(wire.decode_request(blob))
        assert again == blob


def test_truncated_payload_reports_byte_counts():
    blob = FIXTURE.read_bytes()
    with pytest.raises(LengthMismatch) as exc:
        wire.decode_request(blob[:-10])
    assert str(len(blob)) in str(exc.value)
    assert str(len(blob) - 10) in str(exc.value)


def test_decode_error_classes():
    blob = bytearray(FIXTURE.read_bytes())
    with pytest.raises(BadMagic):
        wire.decode_request(b"NOPE" + bytes(blob[4:]))
    wrong_version = bytearray(blob)
    struct.pack_into("<H", wrong_version, 4, 9)
    with pytest.raises(VersionUnsupported):
        wire.decode_request(bytes(wrong_version))
    unknown_flags = bytearray(blob)
    struct.pack_into("<H", unknown_flags, 6, 0x8000)
    with pytest.raises(BadHeader):
        wire.decode_request(bytes(unknown_flags))
    bad_method = bytearray(blob)
    bad_method[56] = 9
    with pytest.raises(BadHeader):
        wire.decode_request(bytes(bad_method))
    with pytest.raises(LengthMismatch):
        wire.decode_request(b"CA")


def test_nonfinite_logits_rejected():
    req = wire.decode_request(FIXTURE.read_bytes())
    poisoned = np.array(req.logits)
    poisoned[0, 0, 0] = np.nan
    blob = wire.encode_request(wire.WireRequest(
        **{**req.__dict__, "logits": poisoned}))
    with pytest.raises(NonFinitePayload):
        wire.decode_request(blob)


def test_token_region_out_of_range_rejected():
    req = wire.decode_request(FIXTURE.read_bytes())
    blob = wire.encode_request(wire.WireRequest(
        **{**req.__dict__, "token_region": np.array([0, 1, 7], np.uint16)}))
    with pytest.raises(BadHeader):
        wire.decode_request(blob)


def test_serve_answers_in_order_and_survives_garbage():
    good = FIXTURE.read_bytes()
    inp = io.BytesIO()
    wire.write_frame(inp, good)
    wire.write_frame(inp, b"garbage frame")
    wire.write_frame(inp, good)
    inp.seek(0)
    out = io.BytesIO()
    assert wire.serve(inp, out) == 3
    out.seek(0)
    statuses = []
    while (frame := wire.read_frame(out)) is not None:
        statuses.append(wire.decode_response(frame).status)
    assert statuses == [0, BadMagic.status, 0]


def test_serve_replay_is_bit_identical():
    good = FIXTURE.read_bytes()
    frames = []
    for _ in range(2):
        inp, out = io.BytesIO(), io.BytesIO()
        wire.write_frame(inp, good)
        inp.seek(0)
        wire.serve(inp, out)
        frames.append(out.getvalue())
    assert frames[0] == frames[1]


def test_serve_method_none_is_plain_softmax():
    rng = SplitMix64(5)
    req = random_request(rng)
    req = wire.WireRequest(**{**req.__dict__, "method": 0})
    resp = wire.roundtrip_local(req)
    want = np.array([[oracles.softmax(list(map(float, row)))
                      for row in head] for head in req.logits])
    np.testing.assert_allclose(resp.probs, want, atol=1e-6)


def test_serve_matches_redistribution_oracle():
    rng = SplitMix64(99)
    heads, lh, lw, n = 2, 3, 3, 6
    hw = lh * lw
    logits = np.array([rng.uniform(-5, 5) for _ in range(heads * hw * n)],
                      np.float32).reshape(heads, hw, n)
    masks = np.zeros((2, lh, lw), np.float32)
    masks[0, :, 0] = 1.0
    masks[1, :, 2] = 1.0   # middle column uncovered
    token_region = np.array([0, 1, 1, 2, 0, 0], np.uint16)
    req = wire.WireRequest(
        heads=heads, hw=hw, n_tokens=n, d=4, layer_h=lh, layer_w=lw,
        mask_h=lh, mask_w=lw, n_regions=2, t=700, total_t=1000, sigma=0.0,
        method=4, w_prime=0.5, w_m=0.5, w_a=0.25, t_thr=800, softness=0.5,
        flags=0, logits=logits, token_region=token_region, masks=masks,
    )
    resp = wire.roundtrip_local(req)
    assert resp.status == 0

    region_token = [r > 0 for r in token_region]
    gain = [[float(masks[r - 1].reshape(-1)[p]) if r > 0 else 1.0
             for r in token_region] for p in range(hw)]
    areas = {1: float(masks[0].sum()) / hw, 2: float(masks[1].sum()) / hw}
    pixel_area = []
    for p in range(hw):
        vals = {r: float(masks[r - 1].reshape(-1)[p]) for r in (1, 2)}
        best = max((v, -r) for r, v in vals.items())
        pixel_area.append(areas[-best[1]] if best[0] > 0 else 1.0)
    boost = oracles.boost_schedule(700, 800, 0.5, 1000)
    want, no_local, no_global, _ = oracles.redistribute(
        [[list(map(float, row)) for row in head] for head in logits],
        gain, region_token, pixel_area, w_m=0.5, w_a=0.25, boost=boost)
    np.testing.assert_allclose(resp.probs, np.array(want), atol=1e-6)
    assert resp.no_local == no_local == 3 * 1  # the uncovered middle column
    assert resp.no_global == no_global == 0
    np.testing.assert_allclose(resp.probs.sum(axis=-1), 1.0, atol=1e-5)


def test_response_roundtrip():
    ok = wire.WireResponse(
        status=0, heads=2, hw=3, n_tokens=2, no_local=1, no_global=0,
        m_means=np.array([0.25, 0.5], np.float32),
        probs=np.full((2, 3, 2), 0.5, np.float32),
    )
    back = wire.decode_response(wire.encode_response(ok))
    assert back.status == 0 and back.no_local == 1
    np.testing.assert_array_equal(back.m_means, ok.m_means)
    np.testing.assert_array_equal(back.probs, ok.probs)

    err = wire.decode_response(wire.encode_response(wire.WireResponse(status=4)))
    assert err.status == 4 and err.probs is None


def test_call_over_stream_pair():
    req = wire.decode_request(FIXTURE.read_bytes())
    to_server, from_server = io.BytesIO(), io.BytesIO()
    wire.write_frame(to_server, wire.encode_request(req))
    to_server.seek(0)
    wire.serve(to_server, from_server)
    from_server.seek(0)
    # replay the exchange through the client helper
    client_out = io.BytesIO()
    resp = wire.call(client_out, from_server, req)
    assert resp.status == 0
    to_server.seek(0)
    assert client_out.getvalue() == to_server.getvalue()


def test_make_request_rejects_non_square_hw_without_dims():
    with pytest.raises(BadHeader):
        wire.make_request(np.zeros((1, 6, 2), np.float32), np.zeros(2, np.uint16),
                          np.zeros((0, 1, 1), np.float32),
                          ControlConfig(), StepContext(t=0, total_steps=1))


def test_fuzz_serve_never_crashes():
    rng = SplitMix64(0xF0F0)
    golden = FIXTURE.read_bytes()
    inp = io.BytesIO()
    n_frames = 400
    for _ in range(n_frames):
        mode = rng.randrange(3)
        if mode == 0:
            frame = bytes(rng.randrange(256) for _ in range(rng.randrange(120)))
        elif mode == 1:
            mutated = bytearray(golden)
            for _ in range(1 + rng.randrange(6)):
                mutated[rng.randrange(len(mutated))] = rng.randrange(256)
            frame = bytes(mutated)
        else:
            cut = rng.randrange(len(golden))
            frame = golden[:cut]
        wire.write_frame(inp, frame)
    inp.seek(0)
    out = io.BytesIO()
    assert wire.serve(inp, out) == n_frames
    out.seek(0)
    seen = 0
    while (frame := wire.read_frame(out)) is not None:
        wire.decode_response(frame)
        seen += 1
    assert seen == n_frames
