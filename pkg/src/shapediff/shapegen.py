"""Procedural parametric shapes with exactly invertible text descriptions.

Three categories (table, chair, lamp) are assembled from axis-aligned
primitives inside the unit cube, z up. Every attribute is quantized into
named levels, and each level maps to geometry aligned to the default 8^3
voxel lattice (voxel side 1/8, centers at odd multiples of 1/16). That
alignment is deliberate: level choices change voxel counts by whole voxels,
so a rasterized grid determines every level exactly, text rendering is
invertible, and edit pairs are guaranteed visible after rasterization.

The continuous attribute value stored on a ShapeSpec is the level nominal
plus a small uniform jitter. The jitter is carried through manifests and
attribute vectors (sub-level variation for the metrics) but geometry is
built from the nominals; at a 1/8 voxel size the sub-voxel wobble of
free-floating geometry would otherwise make rasterized layer/column counts
flip across items with equal levels.

Coordinate/measure conventions used by the attribute schema:
* sizes (top/seat/base/shade) are half-extents in {0.25, 0.375}
* slab thicknesses are full extents in {0.125, 0.25}
* leg widths are full extents in {0.125, 0.25, 0.375}
* heights are full extents measured from z=0 (legs) or the z of a slab edge
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .numcore import Rng

__all__ = [
    "Part",
    "ShapeSpec",
    "EditPair",
    "DatasetItem",
    "DatasetError",
    "CATEGORIES",
    "COLOR_NAMES",
    "COLOR_RGB",
    "GRAY",
    "GRAY_NAME",
    "SCHEMAS",
    "AttrDef",
    "VOCAB",
    "sample_shape",
    "build_parts",
    "abstract_shape",
    "strip_style",
    "make_edit_pair",
    "render_text",
    "parse_text",
    "parse_edit_prompt",
    "edit_phrase",
    "related_labels",
    "gen_dataset",
    "write_dataset",
    "read_dataset",
]


CATEGORIES = ("table", "chair", "lamp")

COLOR_NAMES = ("red", "green", "blue", "yellow", "white", "black", "orange", "purple")
COLOR_RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.15),
    "blue": (0.15, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.6, 0.15, 0.8),
}
GRAY_NAME = "gray"
GRAY = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class Part:
    """One axis-aligned primitive; ellipsoids/cylinders via half_extents."""

    primitive: str  # cuboid | cylinder | sphere
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    color: tuple[float, float, float]
    label: str

    def __post_init__(self):
        if self.primitive not in ("cuboid", "cylinder", "sphere"):
            raise ValueError(f"unknown primitive {self.primitive!r}")
        for c, h in zip(self.center, self.half_extents):
            if h < 1.0 / 16.0:
                raise ValueError("part thinner than one voxel at default resolution")
            if c - h < -1e-9 or c + h > 1.0 + 1e-9:
                raise ValueError("part leaves the unit cube")


@dataclass
class ShapeSpec:
    category: str
    parts: tuple[Part, ...]
    levels: dict[str, int]
    values: dict[str, object]  # attr -> float, or RGB tuple for "color"
    seed: int

    def prompt(self) -> str:
        return render_text(self)


@dataclass
class EditPair:
    distractor: ShapeSpec
    target: ShapeSpec
    edited_attribute: str
    prompt: str


# ---------------------------------------------------------------------------
# Attribute schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttrDef:
    name: str
    nominals: tuple[float, ...]  # continuous value per level
    words: tuple[str, ...]  # one word per level (full-prompt slot)
    jitter: float  # half-width of the stored continuous band
    ordinal: bool  # ordinal -> comparative edit phrases


_LEG_THICKNESS = AttrDef("leg_thickness", (0.125, 0.25, 0.375), ("thin", "medium", "thick"), 0.015, True)

SCHEMAS: dict[str, tuple[AttrDef, ...]] = {
    "table": (
        AttrDef("n_legs", (4.0, 3.0), ("four", "three"), 0.0, False),
        AttrDef("leg_height", (0.25, 0.375, 0.5), ("short", "mid-height", "tall"), 0.02, True),
        _LEG_THICKNESS,
        AttrDef("top_size", (0.25, 0.375), ("small", "large"), 0.02, True),
        AttrDef("top_roundness", (0.0, 1.0), ("squared", "rounded"), 0.0, False),
        AttrDef("top_thickness", (0.125, 0.25), ("thin", "thick"), 0.015, True),
        AttrDef("color", (), COLOR_NAMES, 0.0, False),
    ),
    "chair": (
        AttrDef("leg_height", (0.25, 0.375), ("short", "tall"), 0.02, True),
        _LEG_THICKNESS,
        AttrDef("seat_size", (0.25, 0.375), ("small", "large"), 0.02, True),
        AttrDef("seat_thickness", (0.125, 0.25), ("thin", "thick"), 0.015, True),
        AttrDef("back_height", (0.25, 0.375), ("low", "high"), 0.02, True),
        AttrDef("has_arms", (0.0, 1.0), ("no", "two"), 0.0, False),
        AttrDef("color", (), COLOR_NAMES, 0.0, False),
    ),
    "lamp": (
        AttrDef("base_size", (0.25, 0.375), ("small", "large"), 0.02, True),
        AttrDef("pole_height", (0.375, 0.5, 0.625), ("short", "mid-height", "tall"), 0.02, True),
        AttrDef("shade_size", (0.25, 0.375), ("small", "large"), 0.02, True),
        AttrDef("shade_shape", (0.0, 1.0), ("square", "rounded"), 0.0, False),
        AttrDef("shade_height", (0.125, 0.25), ("shallow", "deep"), 0.015, True),
        AttrDef("color", (), COLOR_NAMES, 0.0, False),
    ),
}


def schema_for(category: str) -> tuple[AttrDef, ...]:
    try:
        return SCHEMAS[category]
    except KeyError:
        raise ValueError(f"unknown category {category!r}") from None


def _attr_def(category: str, name: str) -> AttrDef:
    for d in schema_for(category):
        if d.name == name:
            return d
    raise KeyError(f"{category} has no attribute {name!r}")


# ---------------------------------------------------------------------------
# Geometry builders (level -> lattice-aligned parts)
# ---------------------------------------------------------------------------

def _leg_parts(n_legs: int, height: float, width_level: int, color) -> list[Part]:
    w = _LEG_THICKNESS.nominals[width_level]
    h = w / 2.0
    # medium legs (2 columns wide) center on lattice lines, odd widths on
    # voxel centers, so rasterized widths are exactly 1/2/3 columns
    if width_level == 1:
        outer, tri_top, tri_y = 0.25, (0.5, 0.75), 0.25
    else:
        outer, tri_top, tri_y = 0.3125, (0.4375, 0.8125), 0.1875
    if n_legs == 4:
        xy = [(0.5 - outer, 0.5 - outer), (0.5 - outer, 0.5 + outer),
              (0.5 + outer, 0.5 - outer), (0.5 + outer, 0.5 + outer)]
    else:
        xy = [tri_top, (0.5 - outer, tri_y), (0.5 + outer, tri_y)]
    return [
        Part("cuboid", (x, y, height / 2.0), (h, h, height / 2.0), color, "leg")
        for x, y in xy
    ]


def _build_table(levels: dict[str, int], color) -> list[Part]:
    n_legs = 4 - levels["n_legs"]
    H = (0.25, 0.375, 0.5)[levels["leg_height"]]
    r = (0.25, 0.375)[levels["top_size"]]
    tt = (0.125, 0.25)[levels["top_thickness"]]
    prim = "cylinder" if levels["top_roundness"] else "cuboid"
    parts = _leg_parts(n_legs, H, levels["leg_thickness"], color)
    parts.append(Part(prim, (0.5, 0.5, H + tt / 2.0), (r, r, tt / 2.0), color, "top"))
    return parts


def _build_chair(levels: dict[str, int], color) -> list[Part]:
    H = (0.25, 0.375)[levels["leg_height"]]
    r = (0.25, 0.375)[levels["seat_size"]]
    st = (0.125, 0.25)[levels["seat_thickness"]]
    bh = (0.25, 0.375)[levels["back_height"]]
    parts = _leg_parts(4, H, levels["leg_thickness"], color)
    parts.append(Part("cuboid", (0.5, 0.5, H + st / 2.0), (r, r, st / 2.0), color, "seat"))
    parts.append(Part("cuboid", (0.5, 0.5 + r - 0.0625, H + st + bh / 2.0),
                      (r, 0.0625, bh / 2.0), color, "back"))
    if levels["has_arms"]:
        # arms stop one empty column short of the back so per-layer
        # connected components stay separate
        for sx in (-1.0, 1.0):
            parts.append(Part("cuboid", (0.5 + sx * (r - 0.0625), 0.375, H + st + 0.0625),
                              (0.0625, r - 0.125, 0.0625), color, "arm"))
    return parts


def _build_lamp(levels: dict[str, int], color) -> list[Part]:
    rb = (0.25, 0.375)[levels["base_size"]]
    pole_top = (0.375, 0.5, 0.625)[levels["pole_height"]]
    rs = (0.25, 0.375)[levels["shade_size"]]
    sh = (0.125, 0.25)[levels["shade_height"]]
    shade_prim = "cylinder" if levels["shade_shape"] else "cuboid"
    return [
        Part("cylinder", (0.5, 0.5, 0.0625), (rb, rb, 0.0625), color, "base"),
        Part("cuboid", (0.5, 0.5, (0.125 + pole_top) / 2.0),
             (0.09, 0.09, (pole_top - 0.125) / 2.0), color, "pole"),
        Part(shade_prim, (0.5, 0.5, pole_top + sh / 2.0), (rs, rs, sh / 2.0), color, "shade"),
    ]


_BUILDERS = {"table": _build_table, "chair": _build_chair, "lamp": _build_lamp}


def build_parts(category: str, levels: dict[str, int]) -> tuple[Part, ...]:
    """Deterministic geometry for a level assignment (single source of truth)."""
    color_idx = levels["color"]
    color = GRAY if color_idx == len(COLOR_NAMES) else COLOR_RGB[COLOR_NAMES[color_idx]]
    return tuple(_BUILDERS[category](levels, color))


def _values_for(category: str, levels: dict[str, int], rng: Rng | None) -> dict[str, object]:
    values: dict[str, object] = {}
    for d in schema_for(category):
        if d.name == "color":
            idx = levels["color"]
            values["color"] = GRAY if idx == len(COLOR_NAMES) else COLOR_RGB[COLOR_NAMES[idx]]
        else:
            nominal = d.nominals[levels[d.name]]
            if rng is not None and d.jitter > 0.0:
                nominal = nominal + float(rng.uniform(-d.jitter, d.jitter, ()))
            values[d.name] = float(nominal)
    return values


def sample_shape(rng: Rng, category: str) -> ShapeSpec:
    """Draw one shape; all randomness comes from ``rng`` (deterministic)."""
    schema = schema_for(category)
    levels: dict[str, int] = {}
    for d in schema:
        n = len(COLOR_NAMES) if d.name == "color" else len(d.nominals)
        levels[d.name] = int(rng.integers(0, n))
    values = _values_for(category, levels, rng)
    return ShapeSpec(category, build_parts(category, levels), levels, values, seed=int(rng.stream))


# ---------------------------------------------------------------------------
# Derived shapes
# ---------------------------------------------------------------------------

_ROUNDNESS_ATTRS = {"top_roundness", "shade_shape"}


def abstract_shape(spec: ShapeSpec) -> ShapeSpec:
    """Proxy abstraction: bounding cuboids for every part, neutral gray."""
    levels = dict(spec.levels)
    for name in _ROUNDNESS_ATTRS:
        if name in levels:
            levels[name] = 0
    levels["color"] = len(COLOR_NAMES)  # gray sentinel
    values = dict(spec.values)
    for name in _ROUNDNESS_ATTRS:
        if name in values:
            values[name] = 0.0
    values["color"] = GRAY
    parts = tuple(
        Part("cuboid", p.center, p.half_extents, GRAY, p.label) for p in spec.parts
    )
    return ShapeSpec(spec.category, parts, levels, values, spec.seed)


def strip_style(spec: ShapeSpec) -> ShapeSpec:
    """Uncolored variant: identical geometry, all colors neutral gray."""
    levels = dict(spec.levels)
    levels["color"] = len(COLOR_NAMES)
    values = dict(spec.values)
    values["color"] = GRAY
    parts = tuple(
        Part(p.primitive, p.center, p.half_extents, GRAY, p.label) for p in spec.parts
    )
    return ShapeSpec(spec.category, parts, levels, values, spec.seed)


def rebuild(spec: ShapeSpec, levels: dict[str, int], rng: Rng | None = None) -> ShapeSpec:
    """New spec with the given levels; values rejittered only where changed."""
    values = dict(spec.values)
    for d in schema_for(spec.category):
        if levels[d.name] == spec.levels[d.name]:
            continue
        if d.name == "color":
            idx = levels["color"]
            values["color"] = GRAY if idx == len(COLOR_NAMES) else COLOR_RGB[COLOR_NAMES[idx]]
        else:
            nominal = d.nominals[levels[d.name]]
            if rng is not None and d.jitter > 0.0:
                nominal = nominal + float(rng.uniform(-d.jitter, d.jitter, ()))
            values[d.name] = float(nominal)
    return ShapeSpec(spec.category, build_parts(spec.category, levels), levels, values, spec.seed)


def make_edit_pair(rng: Rng, spec: ShapeSpec) -> EditPair:
    """Resample one attribute to a different level; prompt names the change."""
    schema = schema_for(spec.category)
    d = schema[int(rng.integers(0, len(schema)))]
    n = len(COLOR_NAMES) if d.name == "color" else len(d.nominals)
    old = spec.levels[d.name]
    new = int(rng.integers(0, n - 1))
    if new >= old:
        new += 1
    levels = dict(spec.levels)
    levels[d.name] = new
    target = rebuild(spec, levels, rng)
    return EditPair(spec, target, d.name, edit_phrase(spec.category, d.name, old, new))


def related_labels(pair: EditPair) -> frozenset[str]:
    """Part labels whose geometry differs between distractor and target."""
    def by_label(spec: ShapeSpec) -> dict[str, list[tuple]]:
        out: dict[str, list[tuple]] = {}
        for p in spec.parts:
            out.setdefault(p.label, []).append((p.primitive, p.center, p.half_extents))
        for v in out.values():
            v.sort()
        return out

    a, b = by_label(pair.distractor), by_label(pair.target)
    labels = set(a) | set(b)
    return frozenset(l for l in labels if a.get(l) != b.get(l))


# ---------------------------------------------------------------------------
# Text templates
# ---------------------------------------------------------------------------

# Fixed token patterns; "{attr}" is a one-word slot. Parsing matches tokens
# positionally, so slot words only need to be unique within an attribute.
_PATTERNS = {
    "table": "a {color} table with {n_legs} {leg_height} {leg_thickness} legs "
             "and a {top_size} {top_roundness} {top_thickness} top",
    "chair": "a {color} chair with {leg_height} {leg_thickness} legs a {seat_size} "
             "{seat_thickness} seat a {back_height} back and {has_arms} armrests",
    "lamp": "a {color} lamp with a {base_size} base a {pole_height} pole and a "
            "{shade_size} {shade_shape} {shade_height} shade",
}


def _slot_words(category: str, name: str) -> tuple[str, ...]:
    if name == "color":
        return COLOR_NAMES + (GRAY_NAME,)
    return _attr_def(category, name).words


def render_text(spec: ShapeSpec) -> str:
    """Deterministic full description; every attribute appears exactly once."""
    words = {}
    for token in _PATTERNS[spec.category].split():
        if token.startswith("{"):
            name = token[1:-1]
            words[name] = _slot_words(spec.category, name)[spec.levels[name]]
    return _PATTERNS[spec.category].format(**words)


def parse_text(prompt: str) -> tuple[str, dict[str, int]]:
    """Invert render_text; raises ValueError on anything else."""
    tokens = prompt.split()
    for category, pattern in _PATTERNS.items():
        ptoks = pattern.split()
        if len(ptoks) != len(tokens):
            continue
        levels: dict[str, int] = {}
        ok = True
        for pt, t in zip(ptoks, tokens):
            if pt.startswith("{"):
                name = pt[1:-1]
                try:
                    levels[name] = _slot_words(category, name).index(t)
                except ValueError:
                    ok = False
                    break
            elif pt != t:
                ok = False
                break
        if ok:
            return category, levels
    raise ValueError(f"prompt does not match any template: {prompt!r}")


# Edit phrases. Ordinal attributes use comparatives keyed by direction sign;
# the rest use absolute phrases keyed by target level.
_ORDINAL_PHRASES = {
    "leg_height": ("the legs are shorter", "the legs are taller"),
    "leg_thickness": ("the legs are thinner", "the legs are thicker"),
    "top_size": ("the top is smaller", "the top is larger"),
    "top_thickness": ("the top is thinner", "the top is thicker"),
    "seat_size": ("the seat is smaller", "the seat is larger"),
    "seat_thickness": ("the seat is thinner", "the seat is thicker"),
    "back_height": ("the back is shorter", "the back is taller"),
    "base_size": ("the base is smaller", "the base is larger"),
    "pole_height": ("the pole is shorter", "the pole is taller"),
    "shade_size": ("the shade is smaller", "the shade is larger"),
    "shade_height": ("the shade is shallower", "the shade is deeper"),
}
_ABSOLUTE_PHRASES = {
    "n_legs": ("the table has four legs", "the table has three legs"),
    "top_roundness": ("the top is squared", "the top is rounded"),
    "has_arms": ("the armrests are removed", "armrests are added"),
    "shade_shape": ("the shade is squared", "the shade is rounded"),
}


def edit_phrase(category: str, name: str, old_level: int, new_level: int) -> str:
    if name == "color":
        return f"the color is {COLOR_NAMES[new_level]}"
    d = _attr_def(category, name)
    if d.ordinal:
        return _ORDINAL_PHRASES[name][1 if new_level > old_level else 0]
    return _ABSOLUTE_PHRASES[name][new_level]


@dataclass(frozen=True)
class EditDirection:
    attribute: str
    sign: int  # +1 / -1 for ordinal edits, 0 for absolute ones
    target_level: int | None  # level index for absolute edits, else None


_EDIT_LOOKUP: dict[str, EditDirection] = {}
for _name, (_lo, _hi) in _ORDINAL_PHRASES.items():
    _EDIT_LOOKUP[_lo] = EditDirection(_name, -1, None)
    _EDIT_LOOKUP[_hi] = EditDirection(_name, +1, None)
for _name, _phrases in _ABSOLUTE_PHRASES.items():
    for _lvl, _p in enumerate(_phrases):
        _EDIT_LOOKUP[_p] = EditDirection(_name, 0, _lvl)
for _lvl, _cname in enumerate(COLOR_NAMES):
    _EDIT_LOOKUP[f"the color is {_cname}"] = EditDirection("color", 0, _lvl)


def parse_edit_prompt(prompt: str) -> EditDirection:
    try:
        return _EDIT_LOOKUP[prompt]
    except KeyError:
        raise ValueError(f"not an edit prompt: {prompt!r}") from None


def _vocab() -> tuple[str, ...]:
    words: set[str] = set()
    for pattern in _PATTERNS.values():
        for token in pattern.split():
            if not token.startswith("{"):
                words.add(token)
    for category, schema in SCHEMAS.items():
        for d in schema:
            words.update(_slot_words(category, d.name))
    for phrase in _EDIT_LOOKUP:
        words.update(phrase.split())
    return tuple(sorted(words))


VOCAB = _vocab()


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------

_MAGIC = b"SDDS"
_VERSION = 1
# Documented size bound: 16-byte header plus at most 4096 bytes per item
# (shape items are ~400 B, edit pairs ~900 B of JSON).
ITEM_SIZE_BOUND = 4096


class DatasetError(Exception):
    pass


@dataclass
class DatasetItem:
    kind: str  # "shape" | "edit_pair"
    split: str  # "train" | "test"
    index: int
    spec: ShapeSpec | None = None
    pair: EditPair | None = None


def _spec_to_dict(spec: ShapeSpec) -> dict:
    return {
        "category": spec.category,
        "levels": spec.levels,
        "values": {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.values.items()},
        "seed": spec.seed,
    }


def _spec_from_dict(d: dict) -> ShapeSpec:
    values = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d["values"].items()}
    levels = {k: int(v) for k, v in d["levels"].items()}
    return ShapeSpec(d["category"], build_parts(d["category"], levels), levels, values, int(d["seed"]))


def _item_to_dict(item: DatasetItem) -> dict:
    d = {"kind": item.kind, "split": item.split, "index": item.index}
    if item.kind == "shape":
        d["spec"] = _spec_to_dict(item.spec)
        d["prompt"] = render_text(item.spec)
    elif item.kind == "edit_pair":
        d["distractor"] = _spec_to_dict(item.pair.distractor)
        d["target"] = _spec_to_dict(item.pair.target)
        d["edited_attribute"] = item.pair.edited_attribute
        d["prompt"] = item.pair.prompt
    else:
        raise DatasetError(f"unknown item kind {item.kind!r}")
    return d


def _item_from_dict(d: dict) -> DatasetItem:
    kind = d["kind"]
    if kind == "shape":
        return DatasetItem(kind, d["split"], int(d["index"]), spec=_spec_from_dict(d["spec"]))
    if kind == "edit_pair":
        pair = EditPair(
            _spec_from_dict(d["distractor"]),
            _spec_from_dict(d["target"]),
            d["edited_attribute"],
            d["prompt"],
        )
        return DatasetItem(kind, d["split"], int(d["index"]), pair=pair)
    raise DatasetError(f"unknown item kind {kind!r}")


def write_dataset(items: Sequence[DatasetItem], path: str | Path) -> None:
    """Little-endian container: magic, u32 version, u64 count, then per item
    a u32 length-prefixed UTF-8 JSON record."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(items)))
        for item in items:
            blob = json.dumps(_item_to_dict(item), sort_keys=True, separators=(",", ":")).encode()
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_dataset(path: str | Path) -> list[DatasetItem]:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise DatasetError(f"{path}: not a shape dataset (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    (count,) = struct.unpack_from("<Q", raw, 8)
    items: list[DatasetItem] = []
    off = 16
    for _ in range(count):
        if off + 4 > len(raw):
            raise DatasetError(f"{path}: truncated dataset")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + n > len(raw):
            raise DatasetError(f"{path}: truncated dataset")
        items.append(_item_from_dict(json.loads(raw[off:off + n].decode())))
        off += n
    return items


def gen_dataset(seed: int, n_train: int, n_test: int, task: str,
                categories: Sequence[str] = CATEGORIES) -> list[DatasetItem]:
    """Items 0..n_train-1 are the train split, the rest test (split by index,
    each item seeded by (seed, index))."""
    if task not in ("pretrain", "abstraction", "stylization", "editing"):
        raise ValueError(f"unknown task {task!r}")
    items = []
    for i in range(n_train + n_test):
        rng = Rng(seed).child(i)
        split = "train" if i < n_train else "test"
        category = categories[int(rng.integers(0, len(categories)))]
        spec = sample_shape(rng, category)
        if task == "editing":
            pair = make_edit_pair(rng, spec)
            items.append(DatasetItem("edit_pair", split, i, pair=pair))
        else:
            items.append(DatasetItem("shape", split, i, spec=spec))
    return items
