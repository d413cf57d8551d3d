"""Deterministic shape metrics and the variant comparison harness.

Learned metric models are replaced by analytic analogs that keep each
metric's definition shape: attribute vectors measured from voxel slices
stand in for embeddings (cosine association, direction cosine), a rule
classifier over slice statistics stands in for a category network, and a
Frechet distance over attribute vectors stands in for a feature-space FPD.

Measurement procedures (validated exact on clean lattice grids):
  * sizes            bounding-box half-extent of the relevant slice
  * thicknesses      consecutive-layer run length times voxel size
  * leg height/count occupied layers below the slab; connected components
                     in the slice just below it
  * roundness        isoperimetric ratio 4*pi*A/P^2 of the top slice
                     (square slabs ~0.785, rounded ones <=0.70)
  * color            occupancy-weighted mean RGB
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.linalg import sqrtm
from scipy.spatial import cKDTree

from .codec import PointCloud, VoxelGrid, decode, encode, point_cloud, voxelize
from .diffusion import sample, sdedit_sample
from .numcore import Rng
from .shapegen import (
    CATEGORIES,
    COLOR_RGB,
    COLOR_NAMES,
    SCHEMAS,
    DatasetItem,
    ShapeSpec,
    abstract_shape,
    build_parts,
    parse_edit_prompt,
    parse_text,
    render_text,
    strip_style,
)
from .train import Checkpoint, CheckpointError, load_checkpoint

__all__ = [
    "AttributeVector",
    "attr_of_spec",
    "attr_of_grid",
    "attr_of_text",
    "vec_sim",
    "sim",
    "dir_sim",
    "dir_sim_full",
    "lab_analog",
    "category_probs",
    "classify",
    "class_distortion",
    "chamfer",
    "transfer_labels",
    "related_part_labels",
    "local_gd",
    "frechet_gaussians",
    "fpd_analog",
    "MetricReport",
    "run_suite",
    "SUITE_VARIANTS",
]

_V = 0.125  # voxel edge at the working resolution
_COLOR_CH = ("color_r", "color_g", "color_b")
_CLIP = 2.0  # normalized values are clipped; keeps mush from dominating cosines

# union attribute space used when sets mix categories (FPD)
GLOBAL_NAMES: tuple[str, ...] = tuple(
    dict.fromkeys(
        [d.name for cat in CATEGORIES for d in SCHEMAS[cat] if d.name != "color"]
    )
) + _COLOR_CH


def _anchors(category: str, name: str) -> tuple[float, ...]:
    for d in SCHEMAS[category]:
        if d.name == name:
            return tuple(float(v) for v in d.nominals)
    raise KeyError(name)


def _norm(value: float, anchors: tuple[float, ...]) -> float:
    lo, hi = min(anchors), max(anchors)
    x = (value - (lo + hi) / 2.0) / ((hi - lo) / 2.0)
    return float(np.clip(x, -_CLIP, _CLIP))


def _norm_rgb(rgb) -> list[float]:
    return [float(np.clip((c - 0.5) / 0.5, -_CLIP, _CLIP)) for c in rgb]


def _names_for(category: str) -> tuple[str, ...]:
    return tuple(d.name for d in SCHEMAS[category] if d.name != "color") + _COLOR_CH


@dataclass(frozen=True)
class AttributeVector:
    """Normalized attribute reals plus a per-entry validity mask.

    Entries align by name, so vectors from different categories (or from
    single-attribute edit prompts) compare over their shared valid names.
    """

    category: str
    names: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray

    def entry(self, name: str) -> float | None:
        i = self.names.index(name)
        return float(self.values[i]) if self.mask[i] else None


def _vector(category: str, names, pairs: dict[str, float | None]) -> AttributeVector:
    values = np.zeros(len(names), dtype=np.float64)
    mask = np.zeros(len(names), dtype=bool)
    for i, n in enumerate(names):
        v = pairs.get(n)
        if v is not None:
            values[i] = v
            mask[i] = True
    return AttributeVector(category, tuple(names), values, mask)


def attr_of_spec(spec: ShapeSpec) -> AttributeVector:
    pairs: dict[str, float | None] = {}
    for d in SCHEMAS[spec.category]:
        if d.name == "color":
            continue
        pairs[d.name] = _norm(float(spec.values[d.name]), _anchors(spec.category, d.name))
    r, g, b = _norm_rgb(spec.values["color"])
    pairs.update({"color_r": r, "color_g": g, "color_b": b})
    return _vector(spec.category, _names_for(spec.category), pairs)


def attr_of_text(prompt: str) -> AttributeVector:
    """Exact inverse-template parse; unspecified entries are masked.

    Full descriptions fill every entry of their category. Edit phrases
    fill only the edited entry: absolute phrases with the target value,
    ordinal phrases with the bare direction sign.
    """
    if prompt == "":
        return AttributeVector("", (), np.zeros(0), np.zeros(0, dtype=bool))
    try:
        category, levels = parse_text(prompt)
    except ValueError:
        return _edit_vector(prompt)
    pairs: dict[str, float | None] = {}
    for d in SCHEMAS[category]:
        if d.name == "color":
            continue
        pairs[d.name] = _norm(float(d.nominals[levels[d.name]]),
                              _anchors(category, d.name))
    r, g, b = _norm_rgb(COLOR_RGB[COLOR_NAMES[levels["color"]]])
    pairs.update({"color_r": r, "color_g": g, "color_b": b})
    return _vector(category, _names_for(category), pairs)


def _edit_vector(prompt: str) -> AttributeVector:
    ed = parse_edit_prompt(prompt)  # raises on unparseable text
    if ed.attribute == "color":
        r, g, b = _norm_rgb(COLOR_RGB[COLOR_NAMES[ed.target_level]])
        return _vector("", _COLOR_CH, {"color_r": r, "color_g": g, "color_b": b})
    if ed.target_level is None:
        value = float(ed.sign)  # direction only, already on the normalized scale
    else:
        cats = [c for c in CATEGORIES
                if any(d.name == ed.attribute for d in SCHEMAS[c])]
        anchors = _anchors(cats[0], ed.attribute)
        value = _norm(anchors[ed.target_level], anchors)
    return _vector("", (ed.attribute,), {ed.attribute: value})


# ---------------------------------------------------------------------------
# Slice statistics, classification, grid measurement
# ---------------------------------------------------------------------------

def _slice_stats(occ: np.ndarray) -> list[tuple[int, int]]:
    """(area, component count) per z layer."""
    out = []
    for z in range(occ.shape[2]):
        layer = occ[:, :, z]
        area = int(layer.sum())
        out.append((area, int(ndimage.label(layer)[1]) if area else 0))
    return out


def _iso_ratio(layer: np.ndarray) -> float:
    area = float(layer.sum())
    pad = np.pad(layer, 1)
    core = pad[1:-1, 1:-1]
    perim = int((core & ~pad[:-2, 1:-1]).sum() + (core & ~pad[2:, 1:-1]).sum()
                + (core & ~pad[1:-1, :-2]).sum() + (core & ~pad[1:-1, 2:]).sum())
    return 4.0 * math.pi * area / float(perim * perim)


def _bbox_half(layer: np.ndarray) -> float:
    xs, ys = np.nonzero(layer)
    return max(int(xs.max() - xs.min()) + 1, int(ys.max() - ys.min()) + 1) / 2.0 * _V


def _comp_widths(layer: np.ndarray) -> tuple[int, list[float]]:
    lab, n = ndimage.label(layer)
    widths = []
    for c in range(1, n + 1):
        xs, ys = np.nonzero(lab == c)
        widths.append(max(int(xs.max() - xs.min()) + 1, int(ys.max() - ys.min()) + 1) * _V)
    return n, widths


def category_probs(grid: VoxelGrid) -> dict[str, float]:
    """Rule-classifier category probabilities from slice statistics.

    Scores: lamp = covered stem fraction (thin single-component layers
    with something wider above); table/chair split multi-leg evidence
    (components at the bottom layer) by whether occupancy continues
    above the highest wide single-component slab.
    """
    occ = grid.occupancy.astype(bool)
    if not occ.any():
        raise ValueError("unclassifiable grid: no occupancy")
    st = _slice_stats(occ)
    zocc = [z for z, (a, _) in enumerate(st) if a]
    stem = sum(
        1 for z in zocc
        if st[z][1] == 1 and st[z][0] <= 6
        and any(st[z2][0] > st[z][0] for z2 in zocc if z2 > z)
    )
    s_lamp = min(1.0, 3.0 * stem / len(zocc))
    s_multi = min(1.0, max(0.0, (st[zocc[0]][1] - 1) / 2.0))
    slabs = [z for z in zocc if st[z][1] == 1 and st[z][0] >= 12]
    above = sum(1 for z in zocc if slabs and z > max(slabs))
    s_chair = min(1.0, above / 2.0) if slabs else 0.0
    scores = {
        "table": s_multi * (1.0 - s_chair),
        "chair": s_multi * s_chair,
        "lamp": s_lamp,
    }
    total = sum(scores.values()) + 3e-9
    return {c: (scores[c] + 1e-9) / total for c in CATEGORIES}


def classify(grid: VoxelGrid) -> str:
    probs = category_probs(grid)
    return max(CATEGORIES, key=lambda c: probs[c])


def class_distortion(grid_in: VoxelGrid, grid_out: VoxelGrid) -> float:
    """|p_cat(in) - p_cat(out)| for the input's own category."""
    p_in = category_probs(grid_in)
    p_out = category_probs(grid_out)
    cat = max(CATEGORIES, key=lambda c: p_in[c])
    return abs(p_in[cat] - p_out[cat])


def _measure_table(occ, st, zocc, pairs):
    zhi = max(zocc)
    run = 0
    for z in range(zhi, -1, -1):
        if st[z][1] == 1 and st[z][0] >= 8:
            run += 1
        else:
            break
    if run:
        pairs["top_thickness"] = run * _V
        pairs["top_size"] = _bbox_half(occ[:, :, zhi])
        pairs["top_roundness"] = 1.0 if _iso_ratio(occ[:, :, zhi]) < 0.74 else 0.0
    below = [z for z in zocc if z <= zhi - run]
    if below:
        pairs["leg_height"] = len(below) * _V
        n, widths = _comp_widths(occ[:, :, max(below)])
        pairs["n_legs"] = float(n)
        pairs["leg_thickness"] = float(np.median(widths))


def _measure_chair(occ, st, zocc, pairs):
    seats = [z for z in zocc if st[z][1] == 1 and st[z][0] >= 12]
    if not seats:
        return
    zs = max(seats)
    run = 0
    for z in range(zs, -1, -1):
        if st[z][1] == 1 and st[z][0] >= 12:
            run += 1
        else:
            break
    pairs["seat_thickness"] = run * _V
    pairs["seat_size"] = _bbox_half(occ[:, :, zs])
    below = [z for z in zocc if z <= zs - run]
    if below:
        pairs["leg_height"] = len(below) * _V
        _, widths = _comp_widths(occ[:, :, max(below)])
        pairs["leg_thickness"] = float(np.median(widths))
    above = [z for z in zocc if z > zs]
    pairs["back_height"] = len(above) * _V
    if zs + 1 < occ.shape[2] and st[zs + 1][0]:
        pairs["has_arms"] = 1.0 if st[zs + 1][1] >= 2 else 0.0
    else:
        pairs["has_arms"] = 0.0


def _measure_lamp(occ, st, zocc, pairs):
    zhi = max(zocc)
    run = 0
    for z in range(zhi, -1, -1):
        if st[z][0] >= 8:
            run += 1
        else:
            break
    if run:
        pairs["shade_height"] = run * _V
        pairs["shade_size"] = _bbox_half(occ[:, :, zhi])
        pairs["shade_shape"] = 1.0 if _iso_ratio(occ[:, :, zhi]) < 0.74 else 0.0
        pairs["pole_height"] = (zhi - run + 1) * _V
    if st[zocc[0]][0] and zocc[0] == 0:
        pairs["base_size"] = _bbox_half(occ[:, :, 0])


_MEASURE = {"table": _measure_table, "chair": _measure_chair, "lamp": _measure_lamp}


def attr_of_grid(grid: VoxelGrid) -> AttributeVector:
    """Classify, then measure the category's schema from voxel slices.

    Unmeasurable entries (degenerate decoded grids) stay masked rather
    than erroring; only an empty grid is an error.
    """
    occ = grid.occupancy.astype(bool)
    if not occ.any():
        raise ValueError("unclassifiable grid: no occupancy")
    category = classify(grid)
    st = _slice_stats(occ)
    zocc = [z for z, (a, _) in enumerate(st) if a]
    raw: dict[str, float] = {}
    _MEASURE[category](occ, st, zocc, raw)
    pairs: dict[str, float | None] = {
        name: _norm(value, _anchors(category, name)) for name, value in raw.items()
    }
    colors = grid.data[..., 1:4][occ]
    r, g, b = _norm_rgb(colors.mean(axis=0))
    pairs.update({"color_r": r, "color_g": g, "color_b": b})
    return _vector(category, _names_for(category), pairs)


# ---------------------------------------------------------------------------
# Similarities
# ---------------------------------------------------------------------------

def vec_sim(a: AttributeVector, b: AttributeVector) -> float:
    """Masked cosine over shared valid names; 0 when support is empty."""
    shared = [n for n in a.names if n in b.names]
    va = np.array([a.values[a.names.index(n)] for n in shared
                   if a.mask[a.names.index(n)] and b.mask[b.names.index(n)]])
    vb = np.array([b.values[b.names.index(n)] for n in shared
                   if a.mask[a.names.index(n)] and b.mask[b.names.index(n)]])
    if va.size == 0:
        return 0.0
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


def sim(grid: VoxelGrid, prompt: str) -> float:
    return vec_sim(attr_of_grid(grid), attr_of_text(prompt))


def dir_sim_full(grid_in: VoxelGrid, grid_out: VoxelGrid,
                 prompt_in: str, prompt_out: str) -> tuple[float, bool]:
    """Cosine between shape delta and text delta over the jointly valid
    names. Zero deltas make the cosine undefined: reported as (0, False)
    and excluded from aggregates by callers."""
    gi, go = attr_of_grid(grid_in), attr_of_grid(grid_out)
    ti, to = attr_of_text(prompt_in), attr_of_text(prompt_out)
    names = [n for n in gi.names
             if n in go.names and n in ti.names and n in to.names]
    ds, dt = [], []
    for n in names:
        if (gi.mask[gi.names.index(n)] and go.mask[go.names.index(n)]
                and ti.mask[ti.names.index(n)] and to.mask[to.names.index(n)]):
            ds.append(go.values[go.names.index(n)] - gi.values[gi.names.index(n)])
            dt.append(to.values[to.names.index(n)] - ti.values[ti.names.index(n)])
    ds, dt = np.array(ds), np.array(dt)
    if ds.size == 0:
        return 0.0, False
    ns, nt = float(np.linalg.norm(ds)), float(np.linalg.norm(dt))
    if ns == 0.0 or nt == 0.0:
        return 0.0, False
    return float(np.dot(ds, dt) / (ns * nt)), True


def dir_sim(grid_in: VoxelGrid, grid_out: VoxelGrid,
            prompt_in: str, prompt_out: str) -> float:
    return dir_sim_full(grid_in, grid_out, prompt_in, prompt_out)[0]


def lab_analog(grid_in: VoxelGrid, grid_out: VoxelGrid, prompt: str) -> float:
    """Association boost sim(out, prompt) - sim(in, prompt); antisymmetric."""
    p = attr_of_text(prompt)
    return vec_sim(attr_of_grid(grid_out), p) - vec_sim(attr_of_grid(grid_in), p)


# ---------------------------------------------------------------------------
# Point-cloud distances
# ---------------------------------------------------------------------------

def _nn_sq(points: np.ndarray, ref: np.ndarray, method: str) -> np.ndarray:
    if method == "brute":
        d2 = np.sum((points[:, None, :] - ref[None, :, :]) ** 2, axis=-1)
        return d2.min(axis=1)
    # recompute through the same expression as the brute route so both
    # methods agree bitwise, not merely to rounding
    _, idx = cKDTree(ref).query(points)
    return np.sum((points - ref[idx]) ** 2, axis=-1)


def chamfer(a: PointCloud, b: PointCloud, method: str = "auto") -> float:
    """Symmetric sum of mean squared nearest-neighbor distances.

    method: "brute" is O(n*m) broadcasting, "tree" uses a spatial index;
    "auto" picks brute below 2048 points. Both are exact.
    """
    pa, pb = np.asarray(a.points, dtype=np.float64), np.asarray(b.points, dtype=np.float64)
    if pa.size == 0 or pb.size == 0:
        raise ValueError("empty point cloud")
    if method == "auto":
        method = "brute" if max(len(pa), len(pb)) < 2048 else "tree"
    return float(_nn_sq(pa, pb, method).mean() + _nn_sq(pb, pa, method).mean())


def transfer_labels(points: np.ndarray, ref: PointCloud) -> np.ndarray:
    """Label each point by its nearest reference point's part label."""
    if ref.labels is None:
        raise ValueError("reference cloud carries no labels")
    _, idx = cKDTree(np.asarray(ref.points)).query(np.asarray(points))
    return np.asarray(ref.labels)[idx]


def _part_geometry(category: str, levels: dict[str, int]) -> dict[str, list]:
    grouped: dict[str, list] = {}
    for p in build_parts(category, levels):
        grouped.setdefault(p.label, []).append(
            (p.primitive, p.center, p.half_extents))
    for v in grouped.values():
        v.sort()
    return grouped


@lru_cache(maxsize=None)
def _related_by_category(category: str) -> dict[str, frozenset[str]]:
    """attribute -> labels whose geometry differs between some pair of
    level assignments that disagree only in that attribute."""
    names = [d.name for d in SCHEMAS[category] if d.name != "color"]
    counts = [len(d.nominals) for d in SCHEMAS[category] if d.name != "color"]
    combos: list[dict[str, int]] = [{}]
    for name, n in zip(names, counts):
        combos = [{**c, name: lvl} for c in combos for lvl in range(n)]
    geom = {tuple(c[n] for n in names): _part_geometry(category, {**c, "color": 0})
            for c in combos}
    related: dict[str, set[str]] = {n: set() for n in names}
    for key, g in geom.items():
        for i, name in enumerate(names):
            if key[i] == 0:
                continue
            other = geom[key[:i] + (key[i] - 1,) + key[i + 1:]]
            labels = set(g) | set(other)
            related[name] |= {l for l in labels if g.get(l) != other.get(l)}
    return {n: frozenset(s) for n, s in related.items()}


@lru_cache(maxsize=None)
def related_part_labels(attribute: str) -> frozenset[str]:
    """Part labels whose geometry can move when `attribute` changes.

    Probed from the generator over every pair of level assignments that
    differ only in the attribute, in every category that has it; color
    never moves geometry.
    """
    out: set[str] = set()
    for cat in CATEGORIES:
        out |= _related_by_category(cat).get(attribute, frozenset())
    return frozenset(out)


def _filter_unrelated(pc: PointCloud, related: frozenset[str]) -> np.ndarray:
    names = np.asarray([pc.label_names[i] for i in pc.labels])
    keep = ~np.isin(names, sorted(related))
    return np.asarray(pc.points)[keep]


def local_gd(a: PointCloud, b: PointCloud, edited_attribute: str) -> float:
    """Chamfer over points whose part label the edit cannot have touched."""
    related = related_part_labels(edited_attribute)
    pa = _filter_unrelated(a, related)
    pb = _filter_unrelated(b, related)
    if pa.size == 0 or pb.size == 0:
        raise ValueError("no unrelated parts")
    dummy = tuple(n for n in a.label_names)
    return chamfer(PointCloud(pa, None, dummy), PointCloud(pb, None, dummy))


# ---------------------------------------------------------------------------
# Distribution distance
# ---------------------------------------------------------------------------

def embed_global(vec: AttributeVector) -> np.ndarray:
    """Project into the union attribute space; invalid entries become 0."""
    out = np.zeros(len(GLOBAL_NAMES), dtype=np.float64)
    for i, n in enumerate(GLOBAL_NAMES):
        if n in vec.names:
            j = vec.names.index(n)
            if vec.mask[j]:
                out[i] = vec.values[j]
    return out


def frechet_gaussians(xa: np.ndarray, xb: np.ndarray) -> float:
    """Frechet distance between Gaussians fit to two sample matrices.

    Rank-deficient covariances (few samples in many dimensions) can defeat
    the matrix square root; those retry with a small diagonal offset.
    """
    xa, xb = np.asarray(xa, dtype=np.float64), np.asarray(xb, dtype=np.float64)
    if xa.shape[0] < 2 or xb.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    mu_a, mu_b = xa.mean(axis=0), xb.mean(axis=0)
    ca = np.cov(xa, rowvar=False)
    cb = np.cov(xb, rowvar=False)
    covmean = sqrtm(ca @ cb, disp=False)[0]
    if not np.isfinite(covmean).all():
        eps = 1e-8 * np.eye(ca.shape[0])
        covmean = sqrtm((ca + eps) @ (cb + eps), disp=False)[0]
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2.0 * covmean))
    return max(d, 0.0)


def fpd_analog(set_a: list[VoxelGrid], set_b: list[VoxelGrid]) -> float:
    xa = np.stack([embed_global(attr_of_grid(g)) for g in set_a])
    xb = np.stack([embed_global(attr_of_grid(g)) for g in set_b])
    return frechet_gaussians(xa, xb)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

SUITE_VARIANTS = ("spice", "shap_e_ft", "sdedit3d", "controlnet3d",
                  "no_zeroconv", "k_cross", "v_cross", "qc_only")
_METRICS = ("gd", "local_gd", "lab", "cd", "sim", "dir_sim")


@dataclass
class MetricReport:
    task: str
    seed: int
    n_steps: int
    cfg_scale: float
    variants: tuple[str, ...]
    skipped: tuple[str, ...]
    items: dict[str, list[dict]]
    aggregates: dict[str, dict[str, float | None]]
    per_category: dict[str, dict[str, dict[str, float | None]]]
    categories: tuple[str, ...] = ()

    def ordering(self) -> list[str]:
        """Variants from best (lowest) to worst mean GD; missing GD last."""
        def key(v):
            gd = self.aggregates[v].get("gd")
            return (gd is None, gd if gd is not None else 0.0)
        return sorted(self.variants, key=key)

    def to_csv(self) -> str:
        cols = ["variant", "item", "category"] + list(_METRICS) + ["fpd"]
        lines = [",".join(cols)]
        for v in self.variants:
            for i, row in enumerate(self.items[v]):
                cells = [v, str(i), row["category"]]
                cells += ["" if row[m] is None else f"{row[m]:.8g}" for m in _METRICS]
                cells.append("")
                lines.append(",".join(cells))
            agg = self.aggregates[v]
            cells = [v, "mean", "all"]
            cells += ["" if agg[m] is None else f"{agg[m]:.8g}" for m in _METRICS]
            cells.append("" if agg["fpd"] is None else f"{agg['fpd']:.8g}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [f"task={self.task} seed={self.seed} steps={self.n_steps} "
                 f"cfg={self.cfg_scale}"]
        if self.skipped:
            lines.append("skipped (no checkpoint): " + ", ".join(self.skipped))
        lines.append("variants by mean GD (best first):")
        for v in self.ordering():
            agg = self.aggregates[v]
            parts = [f"{m}={agg[m]:.5g}" for m in ("gd", "sim", "lab", "cd") + ("fpd",)
                     if agg.get(m) is not None]
            lines.append(f"  {v}: " + " ".join(parts))
        for cat in self.categories:
            lines.append(f"category {cat}:")
            for v in self.variants:
                agg = self.per_category[v].get(cat)
                if not agg:
                    continue
                parts = [f"{m}={agg[m]:.5g}" for m in ("gd", "sim", "lab")
                         if agg.get(m) is not None]
                lines.append(f"  {v}: " + " ".join(parts))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "summary.txt").write_text(self.summary())


def _mean(values: list[float | None]) -> float | None:
    xs = [v for v in values if v is not None]
    return float(np.mean(xs)) if xs else None


def _prepare_items(items: list[DatasetItem], task: str):
    conds = []
    for it in items:
        if task == "editing":
            if it.kind != "edit_pair":
                raise ValueError("editing task needs an edit-pair dataset")
            guidance, ref = it.pair.distractor, it.pair.target
            prompt, attr = it.pair.prompt, it.pair.edited_attribute
            src_prompt = render_text(guidance)
        else:
            if it.kind != "shape":
                raise ValueError(f"{task} task needs a shape dataset")
            ref = it.spec
            guidance = abstract_shape(ref) if task == "abstraction" else strip_style(ref)
            prompt, attr = render_text(ref), None
            src_prompt = prompt
        conds.append((guidance, ref, prompt, attr, src_prompt))
    return conds


def run_suite(checkpoints: dict[str, Checkpoint | str | Path],
              test_set: list[DatasetItem], task: str,
              seed: int = 0, n_steps: int = 64, cfg_scale: float = 1.0,
              sdedit_strength: float = 0.6,
              out_dir: str | Path | None = None) -> MetricReport:
    """Sample every configured variant on identical conditions and seeds,
    compute all metrics, and report with variants ordered by mean GD.

    Items are matched across variants through per-item child rng streams,
    so a variant's outputs do not depend on which other variants run.
    Undefined per-item values (empty output, undefined direction, no
    unrelated parts) are recorded as missing and excluded from means.
    """
    if task not in ("abstraction", "stylization", "editing"):
        raise ValueError(f"unknown evaluation task {task!r}")
    if not test_set:
        raise ValueError("empty test set")
    conds = _prepare_items(test_set, task)
    base = Rng(seed)
    n = len(conds)

    loaded: dict[str, Checkpoint] = {}
    skipped = []
    for variant in SUITE_VARIANTS:
        src = checkpoints.get(variant)
        if src is None:
            skipped.append(variant)
            continue
        expect = "shap_e_ft" if variant == "sdedit3d" else variant
        ckpt = src if isinstance(src, Checkpoint) else load_checkpoint(src, expect_kind=expect)
        if ckpt.kind != expect:
            raise CheckpointError(
                f"checkpoint for {variant} has kind {ckpt.kind!r}, expected {expect!r}")
        loaded[variant] = ckpt
    codec_cfgs = {repr(c.codec_config) for c in loaded.values()}
    if len(codec_cfgs) > 1:
        raise CheckpointError("checkpoints disagree on codec configuration")
    resolution = (next(iter(loaded.values())).codec().resolution if loaded else 8)

    guidance_grids = [voxelize(g, resolution) for g, _, _, _, _ in conds]
    ref_grids = [voxelize(r, resolution) for _, r, _, _, _ in conds]
    ref_pcs = [point_cloud(ref_grids[i], rng=base.child(i).child(1)) for i in range(n)]
    prompts = [p for _, _, p, _, _ in conds]
    in_vecs = [attr_of_grid(g) for g in guidance_grids]
    text_vecs = [attr_of_text(p) for p in prompts]

    evaluated = []
    items: dict[str, list[dict]] = {}
    aggregates: dict[str, dict[str, float | None]] = {}
    per_category: dict[str, dict[str, dict[str, float | None]]] = {}
    categories = tuple(dict.fromkeys(r.category for _, r, _, _, _ in conds))

    for variant in SUITE_VARIANTS:
        if variant not in loaded:
            continue
        ckpt = loaded[variant]
        model, sched, codec = ckpt.build_model(), ckpt.schedule(), ckpt.codec()
        z_c = np.stack([encode(g, codec) for g in guidance_grids]).astype(np.float32)
        rngs = [base.child(i).child(0) for i in range(n)]
        if variant == "sdedit3d":
            toks = sdedit_sample(model, sched, z_c, prompts, rngs,
                                 strength=sdedit_strength, n_steps=n_steps,
                                 cfg_scale=cfg_scale, c_clip=ckpt.c_clip)
        else:
            guide = None if variant == "shap_e_ft" else z_c
            toks = sample(model, sched, prompts, guide, rngs, n_steps=n_steps,
                          cfg_scale=cfg_scale, c_clip=ckpt.c_clip)
        rows = []
        out_grids = []
        for i in range(n):
            grid = decode(toks[i], codec)
            out_grids.append(grid)
            row: dict[str, float | str | None] = {m: None for m in _METRICS}
            row["category"] = conds[i][1].category
            occupied = bool(grid.occupancy.astype(bool).any())
            if occupied:
                out_pc = point_cloud(grid, rng=base.child(i).child(2))
                row["gd"] = chamfer(out_pc, ref_pcs[i])
                out_vec = attr_of_grid(grid)
                row["sim"] = vec_sim(out_vec, text_vecs[i])
                row["lab"] = (vec_sim(out_vec, text_vecs[i])
                              - vec_sim(in_vecs[i], text_vecs[i]))
                row["cd"] = class_distortion(guidance_grids[i], grid)
                if task == "editing":
                    attr = conds[i][3]
                    labeled = PointCloud(out_pc.points,
                                         transfer_labels(out_pc.points, ref_pcs[i]),
                                         ref_pcs[i].label_names)
                    try:
                        row["local_gd"] = local_gd(labeled, ref_pcs[i], attr)
                    except ValueError:
                        pass
                    val, defined = dir_sim_full(guidance_grids[i], grid,
                                                conds[i][4], prompts[i])
                    if defined:
                        row["dir_sim"] = val
            rows.append(row)
        items[variant] = rows
        agg: dict[str, float | None] = {m: _mean([r[m] for r in rows]) for m in _METRICS}
        valid_out = [g for g in out_grids if g.occupancy.astype(bool).any()]
        try:
            agg["fpd"] = fpd_analog(valid_out, ref_grids) if len(valid_out) >= 2 else None
        except ValueError:
            agg["fpd"] = None
        aggregates[variant] = agg
        per_category[variant] = {
            cat: {m: _mean([r[m] for r in rows if r["category"] == cat])
                  for m in _METRICS}
            for cat in categories
        }
        evaluated.append(variant)

    report = MetricReport(task=task, seed=seed, n_steps=n_steps, cfg_scale=cfg_scale,
                          variants=tuple(evaluated), skipped=tuple(skipped),
                          items=items, aggregates=aggregates,
                          per_category=per_category, categories=categories)
    if out_dir is not None:
        report.write(out_dir)
    return report
