import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from attnctl.errors import (
    DimensionMismatch,
    EmptyTag,
    NestedSpan,
    TokenSpanOutOfBounds,
    UnbalancedBraces,
    UnknownTag,
)
from attnctl.regions import (
    RegionLayout,
    alignment_from_tags,
    build_alignment,
    parse_annotated_prompt,
    rescale_mask,
    whitespace_token_spans,
)


def square_layout(n_regions=2, size=4):
    # horizontal stripes, one per region, rest is background
    masks = np.zeros((n_regions, size, size))
    for r in range(n_regions):
        masks[r, r, :] = 1.0
    return RegionLayout(
        height=size, width=size,
        tags=tuple(f"R{i + 1}" for i in range(n_regions)),
        masks=masks,
    )


# --- parsing ---------------------------------------------------------------

def test_parse_basic():
    p = parse_annotated_prompt("a {red ball: BALL} on {grass: GROUND}")
    assert p.text == "a red ball on grass"
    assert [(s.start, s.end, s.tag) for s in p.spans] == [
        (2, 10, "BALL"), (14, 19, "GROUND"),
    ]
    # the recorded ranges really carve out the annotated phrases
    assert p.text[2:10] == "red ball"
    assert p.text[14:19] == "grass"


def test_parse_no_annotations():
    p = parse_annotated_prompt("just a plain prompt")
    assert p.text == "just a plain prompt"
    assert p.spans == ()


def test_parse_tag_is_after_last_colon():
    p = parse_annotated_prompt("{scene: night: SKY}")
    assert p.text == "scene: night"
    assert p.spans[0].tag == "SKY"


def test_parse_strips_span_whitespace():
    p = parse_annotated_prompt("x { a cat :  CAT } y")
    assert p.text == "x a cat y"
    assert p.spans[0].tag == "CAT"


def test_parse_error_positions():
    with pytest.raises(UnbalancedBraces) as e:
        parse_annotated_prompt("oops } here")
    assert e.value.position == 5
    with pytest.raises(UnbalancedBraces) as e:
        parse_annotated_prompt("ab {never closed")
    assert e.value.position == 3
    with pytest.raises(NestedSpan) as e:
        parse_annotated_prompt("{a {b: T}: U}")
    assert e.value.position == 3
    with pytest.raises(EmptyTag):
        parse_annotated_prompt("{no tag here}")
    with pytest.raises(EmptyTag):
        parse_annotated_prompt("{text:   }")
    with pytest.raises(EmptyTag):
        parse_annotated_prompt("{: TAG}")


@given(st.text(alphabet=st.characters(blacklist_characters="{}"), max_size=60))
def test_parse_plain_text_roundtrip(text):
    p = parse_annotated_prompt(text)
    assert p.text == text
    assert p.spans == ()


def test_whitespace_token_spans():
    assert whitespace_token_spans("a red  ball ") == [(0, 1), (2, 5), (7, 11)]
    assert whitespace_token_spans("") == []
    assert whitespace_token_spans("   ") == []


# --- alignment -------------------------------------------------------------

def test_alignment_overlap():
    layout = square_layout(2)
    p = parse_annotated_prompt("a {red ball: R1} on {grass: R2}")
    spans = whitespace_token_spans(p.text)  # a / red / ball / on / grass
    al = build_alignment(p, spans, layout)
    assert al.token_region.tolist() == [0, 1, 1, 0, 2]


def test_alignment_largest_overlap_wins():
    layout = square_layout(2)
    p = parse_annotated_prompt("{ab: R1}{cdef: R2}")
    # one token straddling both spans: 2 chars in R1, 4 in R2
    al = build_alignment(p, [(0, 6)], layout)
    assert al.token_region.tolist() == [2]


def test_alignment_tie_prefers_earlier_span():
    layout = square_layout(2)
    p = parse_annotated_prompt("{abc: R2}{def: R1}")
    al = build_alignment(p, [(0, 6)], layout)  # 3 chars in each
    assert al.token_region.tolist() == [2]  # earlier span, tagged R2


def test_alignment_out_of_bounds():
    layout = square_layout(1)
    p = parse_annotated_prompt("{hi: R1}")
    with pytest.raises(TokenSpanOutOfBounds):
        build_alignment(p, [(0, 3)], layout)
    with pytest.raises(TokenSpanOutOfBounds):
        build_alignment(p, [(1, 1)], layout)


def test_alignment_unknown_tag():
    layout = square_layout(1)
    p = parse_annotated_prompt("{hi: NOPE}")
    with pytest.raises(UnknownTag):
        build_alignment(p, [(0, 2)], layout)


def test_alignment_from_tags():
    layout = square_layout(3)
    al = alignment_from_tags([None, "R2", "R3", None], layout)
    assert al.token_region.tolist() == [0, 2, 3, 0]
    assert al.region_token_mask().tolist() == [False, True, True, False]


# --- layouts ---------------------------------------------------------------

def test_layout_validation():
    with pytest.raises(DimensionMismatch):
        RegionLayout(height=2, width=2, tags=("A",), masks=np.zeros((2, 2, 2)))
    with pytest.raises(DimensionMismatch):
        RegionLayout(height=2, width=2, tags=("A",), masks=np.full((1, 2, 2), 1.5))
    with pytest.raises(UnknownTag):
        RegionLayout(height=2, width=2, tags=("A", "A"), masks=np.zeros((2, 2, 2)))
    overlapping = np.ones((2, 2, 2))
    with pytest.raises(DimensionMismatch):
        RegionLayout(height=2, width=2, tags=("A", "B"), masks=overlapping)
    # the same masks are fine when not required to partition
    RegionLayout(height=2, width=2, tags=("A", "B"), masks=overlapping,
                 partitioning=False)


def test_layout_lookup_and_background():
    lay = square_layout(2, size=4)
    assert lay.region_for_tag("R2") == 2
    with pytest.raises(UnknownTag):
        lay.region_for_tag("R9")
    bg = lay.mask_for_region(0)
    assert bg.sum() == 4 * 4 - 2 * 4  # two stripes carved out
    np.testing.assert_array_equal(lay.mask_for_region(1), lay.masks[0])


def test_area_fractions():
    lay = square_layout(2, size=4)
    frac = lay.area_fractions()
    np.testing.assert_allclose(frac, [1.0, 4 / 16, 4 / 16])


def test_masks_are_readonly():
    lay = square_layout(1)
    with pytest.raises(ValueError):
        lay.masks[0, 0, 0] = 0.5


# --- rescaling -------------------------------------------------------------

def test_rescale_halving_known_value():
    m = np.array([[1.0, 1.0], [0.0, 0.0]])
    np.testing.assert_allclose(rescale_mask(m, 1, 1), [[0.5]])


def test_rescale_identity_is_copy():
    m = np.random.default_rng(0).random((5, 7))
    out = rescale_mask(m, 5, 7)
    np.testing.assert_array_equal(out, m)
    assert out is not m


def test_rescale_constant_stays_constant():
    m = np.full((3, 3), 0.25)
    for h, w in [(1, 1), (2, 5), (9, 9), (16, 2)]:
        np.testing.assert_allclose(rescale_mask(m, h, w), np.full((h, w), 0.25))


def test_rescale_matches_reference():
    rng = np.random.default_rng(123)
    for _ in range(25):
        h, w = rng.integers(1, 9, size=2)
        oh, ow = rng.integers(1, 13, size=2)
        m = rng.random((h, w))
        got = rescale_mask(m, int(oh), int(ow))
        want = oracles.bilinear_rescale(m.tolist(), int(oh), int(ow))
        np.testing.assert_allclose(got, want, atol=1e-12)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 10), st.integers(1, 10),
       st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_rescale_stays_in_unit_interval(h, w, oh, ow, seed):
    m = np.random.default_rng(seed).random((h, w))
    out = rescale_mask(m, oh, ow)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_at_resolution_partition_survives():
    lay = square_layout(2, size=8)
    small = lay.at_resolution(3, 3)
    assert small.masks.shape == (2, 3, 3)
    assert small.masks.sum(axis=0).max() <= 1.0 + 1e-9


def test_at_resolution_cached():
    lay = square_layout(2, size=8)
    assert lay.at_resolution(8, 8) is lay
    a = lay.at_resolution(4, 4)
    assert lay.at_resolution(4, 4) is a
