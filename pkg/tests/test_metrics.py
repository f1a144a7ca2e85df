import io
import math
import socket
import threading

import numpy as np
import pytest

import oracles
from attnctl import metrics
from attnctl.errors import (
    DimensionMismatch,
    EmptyMask,
    EmptyTable,
    ProviderFailure,
)
from attnctl.layout_io import write_ppm
from attnctl.metrics import (
    MetricTable,
    StubEmbeddingProvider,
    WireEmbeddingProvider,
    aggregate_report,
    crop_to_mask,
    decode_embed_request,
    diagonal_scores,
    encode_image_request,
    encode_text_request,
    evaluate_dataset,
    evaluate_image,
    format_report,
    local_clip_logits,
    local_clip_probs,
    serve_embeddings,
)
from attnctl.rng import SplitMix64
from attnctl.simplescenes import generate, write_dataset
from attnctl.wire import read_frame, write_frame


class BasisProvider(metrics.EmbeddingProvider):
    """Looks the answer up in a dict keyed by text or image bytes."""

    def __init__(self, table, logit_scale=100.0):
        self.table = table
        self.logit_scale = logit_scale

    def embed_text(self, text):
        return self.table[text]

    def embed_image(self, image):
        return self.table[np.ascontiguousarray(image).tobytes()]


def test_stub_embeddings_are_unit_and_deterministic():
    stub = StubEmbeddingProvider(dim=32)
    a = stub.embed_text("a red ball")
    b = stub.embed_text("a red ball")
    np.testing.assert_array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-12
    assert not np.array_equal(a, stub.embed_text("a blue ball"))
    img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    v = stub.embed_image(img)
    assert abs(np.linalg.norm(v) - 1.0) < 1e-12
    # text and image hash domains are separate
    assert not np.array_equal(stub.embed_text("x"), stub.embed_image(np.frombuffer(b"x", np.uint8)))


def test_crop_whole_image_and_single_pixel():
    image = np.arange(30 * 40 * 3, dtype=np.uint8).reshape(30, 40, 3)
    np.testing.assert_array_equal(crop_to_mask(image, np.ones((30, 40))), image)
    mask = np.zeros((30, 40))
    mask[10, 20] = 1.0
    crop = crop_to_mask(image, mask)
    assert crop.shape == (1, 1, 3)
    np.testing.assert_array_equal(crop[0, 0], image[10, 20])


def test_crop_matches_scanline_bbox_of_circle():
    h = w = 64
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    mask = ((yy - 30) ** 2 + (xx - 40) ** 2 <= 15 ** 2).astype(float)
    image = np.zeros((h, w, 3), np.uint8)
    crop = crop_to_mask(image, mask)
    rows = [y for y in range(h) if any(mask[y, x] > 0.5 for x in range(w))]
    cols = [x for x in range(w) if any(mask[y, x] > 0.5 for y in range(h))]
    assert crop.shape == (rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1, 3)


def test_crop_borders_touch_the_mask():
    rng = SplitMix64(31)
    for _ in range(25):
        mask = np.zeros((20, 20))
        for _ in range(1 + rng.randrange(5)):
            y, x = rng.randrange(20), rng.randrange(20)
            mask[y:y + 1 + rng.randrange(4), x:x + 1 + rng.randrange(4)] = 1.0
        cropped_mask = crop_to_mask(mask[..., None], mask)[..., 0]
        assert cropped_mask[0].max() > 0.5 and cropped_mask[-1].max() > 0.5
        assert cropped_mask[:, 0].max() > 0.5 and cropped_mask[:, -1].max() > 0.5
        assert cropped_mask.sum() == mask.sum()  # nothing above 0.5 lost


def test_crop_empty_and_mismatched():
    image = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(EmptyMask):
        crop_to_mask(image, np.zeros((4, 4)))
    with pytest.raises(DimensionMismatch):
        crop_to_mask(image, np.zeros((5, 4)))


def test_crop_mask_background_zeroes_outside():
    image = np.full((4, 4, 3), 7, np.uint8)
    mask = np.zeros((4, 4))
    mask[1, 1] = mask[1, 2] = mask[2, 1] = 1.0
    crop = crop_to_mask(image, mask, mask_background=True)
    assert crop.shape == (2, 2, 3)
    assert (crop[1, 1] == 0).all()          # inside box, outside mask
    assert (crop[0, 0] == 7).all()
    plain = crop_to_mask(image, mask)
    assert (plain[1, 1] == 7).all()


def _three_region_setup():
    image = np.zeros((6, 6, 3), np.uint8)
    image[0, 0] = (10, 0, 0)
    image[0, 5] = (0, 20, 0)
    image[5, 0] = (0, 0, 30)
    masks = []
    for y, x in ((0, 0), (0, 5), (5, 0)):
        m = np.zeros((6, 6))
        m[y, x] = 1.0
        masks.append(m)
    descriptions = ["red thing", "green thing", "blue thing"]
    crops = [crop_to_mask(image, m) for m in masks]
    return image, masks, descriptions, crops


def test_identical_embeddings_give_uniform_logits():
    image, masks, descriptions, crops = _three_region_setup()
    v = np.zeros(8)
    v[0] = 1.0
    table = {d: v for d in descriptions}
    table.update({c.tobytes(): v for c in crops})
    logits = local_clip_logits(BasisProvider(table), image, masks, descriptions)
    np.testing.assert_allclose(logits, 100.0)


def test_orthogonal_embeddings_give_identity_logits():
    image, masks, descriptions, crops = _three_region_setup()
    eye = np.eye(8)
    table = {d: eye[i] for i, d in enumerate(descriptions)}
    table.update({c.tobytes(): eye[i] for i, c in enumerate(crops)})
    logits = local_clip_logits(BasisProvider(table), image, masks, descriptions)
    np.testing.assert_allclose(logits, 100.0 * np.eye(3), atol=1e-12)
    np.testing.assert_allclose(diagonal_scores(logits), 100.0)


def test_logits_match_direct_dot_products():
    image, masks, descriptions, crops = _three_region_setup()
    rng = np.random.default_rng(8)
    vecs = rng.normal(size=(6, 16))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    table = {d: vecs[i] for i, d in enumerate(descriptions)}
    table.update({c.tobytes(): vecs[3 + i] for i, c in enumerate(crops)})
    logits = local_clip_logits(BasisProvider(table, logit_scale=50.0),
                               image, masks, descriptions)
    for i in range(3):
        for j in range(3):
            want = 50.0 * sum(vecs[3 + i][k] * vecs[j][k] for k in range(16))
            assert abs(logits[i, j] - want) < 1e-9


def test_provider_errors_are_wrapped():
    image, masks, descriptions, _ = _three_region_setup()

    class Broken(metrics.EmbeddingProvider):
        def embed_text(self, text):
            raise RuntimeError("no model")

        def embed_image(self, img):
            return np.zeros(4)  # norm 0: invariant violation

    with pytest.raises(ProviderFailure):
        local_clip_logits(Broken(), image, masks, descriptions)


def test_mismatched_or_empty_inputs():
    image, masks, descriptions, _ = _three_region_setup()
    with pytest.raises(DimensionMismatch):
        local_clip_logits(StubEmbeddingProvider(), image, masks, descriptions[:2])
    with pytest.raises(EmptyTable):
        local_clip_logits(StubEmbeddingProvider(), image, [], [])


def test_probs_basics():
    np.testing.assert_allclose(local_clip_probs([3.0, 3.0]), [0.5, 0.5])
    row = np.array([1.25, 1.25 + math.log(3.0)])
    np.testing.assert_allclose(local_clip_probs(row), [0.25, 0.75], atol=1e-12)


def test_probs_match_oracle_and_shift_invariance():
    rng = SplitMix64(17)
    for _ in range(50):
        row = [rng.uniform(-30, 30) for _ in range(3)]
        got = local_clip_probs(row)
        np.testing.assert_allclose(got, oracles.softmax(row), atol=1e-9)
        assert abs(got.sum() - 1.0) < 1e-9
        shifted = local_clip_probs([v + 123.456 for v in row])
        np.testing.assert_allclose(got, shifted, atol=1e-12)


def test_metric_table_validation():
    with pytest.raises(EmptyTable):
        MetricTable("x", np.zeros((0, 3)))
    with pytest.raises(EmptyTable):
        MetricTable("x", np.zeros(5))
    t = MetricTable("x", [[1.0, 2.0]])
    assert (t.n_examples, t.n_seeds) == (1, 2)


def test_aggregate_worked_example():
    table = MetricTable("m", [[1.0, 3.0], [2.0, 4.0]])
    assert aggregate_report(table) == (2.5, 1.0, 3.5)
    assert oracles.aggregate([[1, 3], [2, 4]], higher_better=True) == (2.5, 1.0, 3.5)
    lower = MetricTable("m", [[1.0, 3.0], [2.0, 4.0]], higher_better=False)
    assert aggregate_report(lower) == (2.5, 1.0, 1.5)


def test_aggregate_single_seed():
    mean, std, best = aggregate_report(MetricTable("m", [[2.0], [4.0]]))
    assert (mean, std, best) == (3.0, 0.0, 3.0)


def test_aggregate_sample_std_flag():
    table = MetricTable("m", [[1.0, 3.0], [2.0, 4.0]])
    mean, std, best = aggregate_report(table, sample_std=True)
    assert (mean, best) == (2.5, 3.5)
    assert abs(std - math.sqrt(2.0)) < 1e-12


def test_aggregate_matches_oracle_on_random_tables():
    rng = SplitMix64(23)
    for _ in range(40):
        n_ex, n_seed = 1 + rng.randrange(6), 1 + rng.randrange(5)
        rows = [[rng.uniform(-10, 10) for _ in range(n_seed)]
                for _ in range(n_ex)]
        for direction in (True, False):
            got = aggregate_report(MetricTable("m", rows, higher_better=direction))
            want = oracles.aggregate(rows, higher_better=direction)
            np.testing.assert_allclose(got, want, atol=1e-12)
        mean, _, best = aggregate_report(MetricTable("m", rows))
        assert best >= mean - 1e-12
        mean, _, best = aggregate_report(MetricTable("m", rows, higher_better=False))
        assert best <= mean + 1e-12


def test_format_report():
    text = format_report([MetricTable("local_clip_prob", [[1.0, 3.0], [2.0, 4.0]])])
    assert text == "local_clip_prob: 2.5000 ± 1.0000 (3.5000)"


def test_evaluate_dataset_end_to_end(tmp_path):
    examples = generate(seed=1, counts=(1, 1, 1, 1, 1, 1, 1, 1))
    write_dataset(examples, tmp_path / "ds")
    rng = SplitMix64(5)
    seeds = [3, 7]
    for ex in examples:
        d = tmp_path / "imgs" / ex.template / f"{ex.index:03d}"
        d.mkdir(parents=True)
        for s in seeds:
            img = np.array([rng.randrange(256) for _ in range(48 * 48 * 3)],
                           np.uint8).reshape(48, 48, 3)
            write_ppm(img, d / f"{s}.ppm")

    provider = StubEmbeddingProvider()
    tables, keys, found_seeds = evaluate_dataset(tmp_path / "ds", tmp_path / "imgs",
                                                 provider)
    assert found_seeds == seeds
    assert len(keys) == 8
    for t in tables.values():
        assert t.values.shape == (8, 2)
        assert np.isfinite(t.values).all()
    assert (tables["local_clip_prob"].values >= 0).all()
    assert (tables["local_clip_prob"].values <= 1).all()

    # spot-check one cell against a direct computation
    from attnctl.layout_io import read_ppm
    from attnctl.regions import rescale_mask
    ex = examples[0]
    lay = ex.layout.rasterize()
    parsed = ex.parsed()
    descs = {s.tag: parsed.text[s.start:s.end] for s in parsed.spans}
    masks = [rescale_mask(lay.masks[i], 48, 48) for i in range(lay.n_regions)]
    image = read_ppm(tmp_path / "imgs" / ex.template / "000" / "3.ppm")
    want_logit, want_prob = evaluate_image(
        provider, image, masks, [descs[t] for t in ex.layout.tags])
    e = keys.index(f"{ex.template}/000")
    assert abs(tables["local_clip_logit"].values[e, 0] - want_logit) < 1e-12
    assert abs(tables["local_clip_prob"].values[e, 0] - want_prob) < 1e-12


def test_evaluate_dataset_requires_rectangular_seeds(tmp_path):
    examples = generate(seed=2, counts=(1, 1, 1, 1, 1, 1, 1, 1))
    write_dataset(examples, tmp_path / "ds")
    img = np.zeros((16, 16, 3), np.uint8)
    img[0, 0] = 1
    for ex in examples:
        d = tmp_path / "imgs" / ex.template / f"{ex.index:03d}"
        d.mkdir(parents=True)
        write_ppm(img, d / "0.ppm")
    (tmp_path / "imgs" / examples[-1].template / "000" / "1.ppm").write_bytes(
        (tmp_path / "imgs" / examples[0].template / "000" / "0.ppm").read_bytes())
    with pytest.raises(DimensionMismatch):
        evaluate_dataset(tmp_path / "ds", tmp_path / "imgs", StubEmbeddingProvider())


def test_evaluate_dataset_missing_images(tmp_path):
    examples = generate(seed=2, counts=(1, 1, 1, 1, 1, 1, 1, 1))
    write_dataset(examples, tmp_path / "ds")
    with pytest.raises(EmptyTable):
        evaluate_dataset(tmp_path / "ds", tmp_path / "imgs", StubEmbeddingProvider())


def test_cemb_request_roundtrip():
    kind, text = decode_embed_request(encode_text_request("a red ball"))
    assert (kind, text) == ("text", "a red ball")
    img = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
    kind, arr = decode_embed_request(encode_image_request(img))
    assert kind == "image"
    np.testing.assert_array_equal(arr, img)
    gray = np.arange(6, dtype=np.uint8).reshape(2, 3)
    _, arr = decode_embed_request(encode_image_request(gray))
    assert arr.shape == (2, 3, 1)


def test_serve_embeddings_stub_stream():
    stub = StubEmbeddingProvider(dim=16, logit_scale=55.0)
    inp = io.BytesIO()
    write_frame(inp, encode_text_request("hello"))
    img = np.full((3, 3, 3), 9, np.uint8)
    write_frame(inp, encode_image_request(img))
    write_frame(inp, b"BAD!frame")
    inp.seek(0)
    out = io.BytesIO()
    assert serve_embeddings(inp, out, stub) == 3
    out.seek(0)
    vec, scale = metrics.decode_embed_response(read_frame(out))
    np.testing.assert_allclose(vec, stub.embed_text("hello"), atol=1e-7)
    assert scale == 55.0
    vec, _ = metrics.decode_embed_response(read_frame(out))
    np.testing.assert_allclose(vec, stub.embed_image(img), atol=1e-7)
    with pytest.raises(ProviderFailure):
        metrics.decode_embed_response(read_frame(out))


def test_wire_provider_over_socketpair():
    left, right = socket.socketpair()
    server_in = right.makefile("rb")
    server_out = right.makefile("wb")
    stub = StubEmbeddingProvider(dim=8, logit_scale=72.0)
    thread = threading.Thread(
        target=serve_embeddings, args=(server_in, server_out, stub), daemon=True)
    thread.start()
    client_w = left.makefile("wb")
    client_r = left.makefile("rb")
    try:
        provider = WireEmbeddingProvider(client_w, client_r)
        vec = provider.embed_text("tiny")
        np.testing.assert_allclose(vec, stub.embed_text("tiny"), atol=1e-7)
        assert provider.logit_scale == 72.0
        img = np.arange(27, dtype=np.uint8).reshape(3, 3, 3)
        np.testing.assert_allclose(provider.embed_image(img),
                                   stub.embed_image(img), atol=1e-7)
    finally:
        # the fd only really closes once every makefile() handle is closed,
        # and the server thread only exits once it sees that EOF
        client_w.close()
        client_r.close()
        left.close()
        thread.join(timeout=5)
        right.close()
    assert not thread.is_alive()
