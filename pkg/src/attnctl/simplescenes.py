"""Synthetic layout+prompt dataset of simple multi-object scenes.

Eight scene families are generated from prompt templates with annotated
placeholder slots, each tied to one of the built-in region layouts.  The
default family sizes are (2, 2, 20, 20, 20, 20, 20, 20) — 124 examples.

Slot mechanics:

* A slot drawing from a named set shares its pool with every other slot of
  the same set in that template, and the pool is drawn *without* replacement:
  "{A}, {A} and {A}" never repeats an object within one example.
* Drawn or fixed slot text may itself contain ``{NAME}`` placeholders that
  are filled from set NAME *with* replacement, independently per slot (so
  "a {C} crystal ball" and "a {C} tennis ball" may share a color).
* A "pair set" holds (backdrop, companions) tuples: one tuple is drawn per
  example; the slot with part 1 gets the backdrop, part 2 one companion.
* Families with a fully fixed prompt stay distinct across examples by
  permuting which region tag each object phrase is annotated with; the plain
  prompt text never changes there.

Uniqueness is enforced on the raw annotated text with bounded resampling.
Every example also carries a freshly drawn color palette for its
segmentation rendering, so a run of the generator is reproducible to the
byte from a single seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ExhaustedUniqueSpace, SetTooSmall, UnknownTag
from .layout_io import (
    LayoutSpec,
    layout_spec_from_dict,
    load_layout_spec,
    region_colors_from,
    render_segmap,
    save_layout_spec,
    write_masks_rle,
    write_ppm,
)
from .regions import AnnotatedPrompt, parse_annotated_prompt
from .rng import SplitMix64

DEFAULT_COUNTS = (2, 2, 20, 20, 20, 20, 20, 20)


@dataclass(frozen=True)
class Lit:
    text: str


@dataclass(frozen=True)
class Slot:
    """One annotated hole in a template.

    Exactly one source applies: ``text`` (fixed phrase), ``set_name``
    (sampled without replacement from the template's sets), or ``pair_set``
    with ``pair_part`` 1/2.
    """

    tag: str
    text: str | None = None
    set_name: str | None = None
    pair_set: str | None = None
    pair_part: int = 0


@dataclass(frozen=True)
class Template:
    name: str
    layout_name: str
    parts: tuple
    count: int
    sets: dict = field(default_factory=dict)
    pairs: dict = field(default_factory=dict)
    # groups of tags whose assignment to slots is shuffled per example
    permute_groups: tuple = ()


@dataclass(frozen=True)
class SimpleScenesExample:
    template: str
    index: int
    raw_prompt: str
    prompt: str
    layout: LayoutSpec
    colors: tuple  # ((r, g, b), ...) with index 0 = background

    def parsed(self) -> AnnotatedPrompt:
        return parse_annotated_prompt(self.raw_prompt)

    def color_array(self) -> np.ndarray:
        return np.array(self.colors, dtype=np.uint8)


# --- the eight templates ---------------------------------------------------

_PHOTO = "a highly detailed photorealistic image of "

TEMPLATES = (
    Template(
        name="rabbit_mage",
        layout_name="rabbit_mage",
        count=2,
        parts=(
            Lit("a digital art of "),
            Slot(tag="FIGURE", text="a rabbit mage"),
            Lit(" standing on "),
            Slot(tag="CLOUDS", text="clouds"),
            Lit(" casting "),
            Slot(tag="ORB", text="a fire ball"),
            Lit(". Background is "),
            Slot(tag="SKY", text="a blue sky"),
            Lit("."),
        ),
        permute_groups=(("FIGURE", "ORB"),),
    ),
    Template(
        name="tabletop_objects",
        layout_name="tabletop_objects",
        count=2,
        parts=(
            Lit(_PHOTO),
            Slot(tag="OBJ_LEFT", text="a gold coin"),
            Lit(", "),
            Slot(tag="OBJ_CENTER", text="a blue crystal ball"),
            Lit(" and "),
            Slot(tag="OBJ_RIGHT", text="a red tennis ball"),
            Lit(" on "),
            Slot(tag="TABLE", text="a wooden table"),
            Lit("."),
        ),
        permute_groups=(("OBJ_LEFT", "OBJ_CENTER", "OBJ_RIGHT"),),
    ),
    Template(
        name="fruit_trio",
        layout_name="fruit_trio",
        count=20,
        sets={"A": ("an orange", "a pumpkin", "an apricot", "a persimmon")},
        parts=(
            Lit(_PHOTO),
            Slot(tag="TOP_LEFT", set_name="A"),
            Lit(", "),
            Slot(tag="BOTTOM", set_name="A"),
            Lit(" and "),
            Slot(tag="TOP_RIGHT", set_name="A"),
            Lit(" on "),
            Slot(tag="TABLE", text="a wooden table"),
        ),
    ),
    Template(
        name="colored_ball_types",
        layout_name="colored_ball_types",
        count=20,
        sets={
            "C": ("red", "blue", "yellow"),
            "A": ("a {C} crystal ball", "a {C} tennis ball", "a {C} ping pong ball"),
            "B": ("a wooden table", "grass"),
        },
        parts=(
            Lit(_PHOTO),
            Slot(tag="LEFT", set_name="A"),
            Lit(", "),
            Slot(tag="CENTER", set_name="A"),
            Lit(" and "),
            Slot(tag="RIGHT", set_name="A"),
            Lit(" on "),
            Slot(tag="SURFACE", set_name="B"),
        ),
    ),
    Template(
        name="colored_balls",
        layout_name="colored_balls",
        count=20,
        sets={
            "C": ("red", "blue", "green", "pink", "white", "yellow"),
            "B": ("a wooden table", "grass"),
        },
        parts=(
            Lit(_PHOTO),
            Slot(tag="LEFT", text="a {C} ball"),
            Lit(", "),
            Slot(tag="CENTER", text="a {C} ball"),
            Lit(" and "),
            Slot(tag="RIGHT", text="a {C} ball"),
            Lit(" on "),
            Slot(tag="SURFACE", set_name="B"),
        ),
    ),
    Template(
        name="fruit_variety",
        layout_name="fruit_variety",
        count=20,
        sets={
            "A": ("an orange", "a red apple", "a green apple", "a watermelon",
                  "a kiwi", "a chestnut", "a walnut", "a peach", "a grape"),
            "B": ("a wooden table", "grass"),
        },
        parts=(
            Lit(_PHOTO),
            Slot(tag="TOP_LEFT", set_name="A"),
            Lit(", "),
            Slot(tag="BOTTOM", set_name="A"),
            Lit(" and "),
            Slot(tag="TOP_RIGHT", set_name="A"),
            Lit(" on "),
            Slot(tag="SURFACE", set_name="B"),
        ),
    ),
    Template(
        name="stacked_pairs",
        layout_name="stacked_pairs",
        count=20,
        sets={
            "A": ("an old-school tv", "a cardboard box", "a square watermelon",
                  "a concrete block", "spongebob", "a yellow book",
                  "a washing machine", "a gopro camera"),
            "B": ("a lush forest", "a brick wall", "a living room"),
        },
        parts=(
            Lit("a photo of "),
            Slot(tag="TOP_LEFT", set_name="A"),
            Lit(" on top of "),
            Slot(tag="BOTTOM_LEFT", set_name="A"),
            Lit(", and to the right "),
            Slot(tag="TOP_RIGHT", set_name="A"),
            Lit(" falling on "),
            Slot(tag="BOTTOM_RIGHT", set_name="A"),
            Lit(". Background is "),
            Slot(tag="BACKGROUND", set_name="B"),
            Lit("."),
        ),
    ),
    Template(
        name="scene_backdrop",
        layout_name="scene_backdrop",
        count=20,
        sets={
            "A": ("a doll house", "a container ship", "an old shack", "a car"),
            "B": ("in the desert", "floating in the sea",
                  "standing on the ground", "standing on grass"),
        },
        pairs={
            "D": (
                ("a dark starry night sky",
                 ("the moon", "a blood red moon", "a hot air balloon")),
                ("a blue sky",
                 ("the sun", "the moon", "a hot air balloon", "the death star")),
                ("a lush green forest",
                 ("a magical fire orb", "a red balloon")),
            ),
        },
        parts=(
            Lit("a photo of "),
            Slot(tag="BOTTOM_RIGHT", set_name="A"),
            Lit(" "),
            Slot(tag="BOTTOM", set_name="B"),
            Lit(" Background is "),
            Slot(tag="TOP", pair_set="D", pair_part=1),
            Lit(" with "),
            Slot(tag="TOP_LEFT", pair_set="D", pair_part=2),
            Lit("."),
        ),
    ),
)


def builtin_layout(name: str) -> LayoutSpec:
    ref = resources.files("attnctl") / "data" / "layouts" / f"{name}.json"
    try:
        doc = json.loads(ref.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UnknownTag(f"no built-in layout named {name!r}") from None
    return layout_spec_from_dict(doc)


def template_by_name(name: str) -> Template:
    for tpl in TEMPLATES:
        if tpl.name == name:
            return tpl
    raise UnknownTag(f"no template named {name!r}")


# --- instantiation ---------------------------------------------------------

def _fill_nested(text: str, sets: dict, rng: SplitMix64) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "{":
            j = text.find("}", i)
            if j < 0:
                raise UnknownTag(f"unclosed placeholder in slot text {text!r}")
            name = text[i + 1:j].strip()
            if name not in sets:
                raise UnknownTag(f"slot text references unknown set {name!r}")
            out.append(rng.choice(sets[name]))
            i = j + 1
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _validate_template(tpl: Template) -> None:
    usage: dict[str, int] = {}
    for part in tpl.parts:
        if isinstance(part, Slot) and part.set_name:
            usage[part.set_name] = usage.get(part.set_name, 0) + 1
    for name, n in usage.items():
        if name not in tpl.sets:
            raise UnknownTag(f"template {tpl.name} uses undefined set {name!r}")
        if n > len(tpl.sets[name]):
            raise SetTooSmall(
                f"template {tpl.name}: {n} slots draw from set {name!r} "
                f"of size {len(tpl.sets[name])} without replacement"
            )


def instantiate(tpl: Template, rng: SplitMix64) -> str:
    """Draw one raw annotated prompt from a template."""
    slot_indices = [i for i, p in enumerate(tpl.parts) if isinstance(p, Slot)]
    tag_for = {i: tpl.parts[i].tag for i in slot_indices}
    for group in tpl.permute_groups:
        members = [i for i in slot_indices if tpl.parts[i].tag in group]
        perm = rng.sample(list(group), len(members))
        for i, tag in zip(members, perm):
            tag_for[i] = tag

    pools: dict[str, list] = {}
    drawn_pairs: dict[str, tuple] = {}
    pieces: list[str] = []
    for i, part in enumerate(tpl.parts):
        if isinstance(part, Lit):
            pieces.append(part.text)
            continue
        if part.set_name:
            pool = pools.setdefault(part.set_name, list(tpl.sets[part.set_name]))
            if not pool:
                raise SetTooSmall(f"set {part.set_name!r} exhausted in {tpl.name}")
            text = pool.pop(rng.randrange(len(pool)))
        elif part.pair_set:
            if part.pair_set not in drawn_pairs:
                drawn_pairs[part.pair_set] = rng.choice(tpl.pairs[part.pair_set])
            first, companions = drawn_pairs[part.pair_set]
            text = first if part.pair_part == 1 else rng.choice(companions)
        else:
            text = part.text
        text = _fill_nested(text, tpl.sets, rng)
        pieces.append("{" + text + ": " + tag_for[i] + "}")
    return "".join(pieces)


# --- generation ------------------------------------------------------------

_MAX_ATTEMPTS_PER_EXAMPLE = 500


def generate(seed: int = 0, counts: tuple | None = None) -> list[SimpleScenesExample]:
    """The full dataset for one seed, in template order.

    Per-example palettes are drawn from the same stream as the prompts, so
    the whole run — including the segmentation bytes written by
    ``write_dataset`` — is a pure function of the seed.
    """
    counts = DEFAULT_COUNTS if counts is None else tuple(counts)
    if len(counts) != len(TEMPLATES):
        raise SetTooSmall(f"need {len(TEMPLATES)} counts, got {len(counts)}")
    rng = SplitMix64(seed)
    out: list[SimpleScenesExample] = []
    for tpl, count in zip(TEMPLATES, counts):
        _validate_template(tpl)
        layout = builtin_layout(tpl.layout_name)
        seen: set[str] = set()
        idx = 0
        attempts = 0
        budget = _MAX_ATTEMPTS_PER_EXAMPLE * count
        while idx < count:
            attempts += 1
            if attempts > budget:
                raise ExhaustedUniqueSpace(
                    f"template {tpl.name}: only {idx} distinct examples "
                    f"found in {attempts - 1} draws (wanted {count})"
                )
            raw = instantiate(tpl, rng)
            if raw in seen:
                continue
            seen.add(raw)
            colors = region_colors_from(rng, len(layout.tags))
            out.append(SimpleScenesExample(
                template=tpl.name,
                index=idx,
                raw_prompt=raw,
                prompt=parse_annotated_prompt(raw).text,
                layout=layout,
                colors=tuple(tuple(int(v) for v in c) for c in colors),
            ))
            idx += 1
    return out


def example_dir(root: str | Path, ex: SimpleScenesExample) -> Path:
    return Path(root) / ex.template / f"{ex.index:03d}"


def write_example(ex: SimpleScenesExample, root: str | Path) -> Path:
    d = example_dir(root, ex)
    d.mkdir(parents=True, exist_ok=True)
    (d / "prompt.txt").write_text(ex.raw_prompt + "\n", encoding="utf-8")
    save_layout_spec(ex.layout, d / "layout.json")
    lay = ex.layout.rasterize()
    write_masks_rle(lay, d / "masks.rle")
    write_ppm(render_segmap(lay, ex.color_array()), d / "segmap.ppm")
    return d


def write_dataset(examples: list[SimpleScenesExample], root: str | Path) -> None:
    for ex in examples:
        write_example(ex, root)


def load_dataset(root: str | Path) -> list[SimpleScenesExample]:
    """Read a written dataset back (prompts and layout specs).

    Palettes are not reconstructed — the segmap file remains the authority
    for colors — so loaded examples carry an empty ``colors`` tuple.
    """
    root = Path(root)
    out: list[SimpleScenesExample] = []
    for tpl_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for ex_dir in sorted(p for p in tpl_dir.iterdir() if p.is_dir()):
            raw = (ex_dir / "prompt.txt").read_text(encoding="utf-8").rstrip("\n")
            spec = load_layout_spec(ex_dir / "layout.json")
            out.append(SimpleScenesExample(
                template=tpl_dir.name,
                index=int(ex_dir.name),
                raw_prompt=raw,
                prompt=parse_annotated_prompt(raw).text,
                layout=spec,
                colors=(),
            ))
    return out
