import numpy as np
import pytest

from shapediff.codec import (
    Codec,
    DEFAULT_CODEC,
    PointCloud,
    VoxelGrid,
    decode,
    encode,
    point_cloud,
    surface_mask,
    voxelize,
    write_obj,
    write_ply,
)
from shapediff.numcore import Rng
from shapediff.shapegen import CATEGORIES, Part, ShapeSpec, sample_shape


def _spec_with(parts):
    return ShapeSpec("table", tuple(parts), {}, {}, 0)


def _random_spec(seed):
    rng = Rng(seed)
    cat = CATEGORIES[int(rng.integers(0, len(CATEGORIES)))]
    return sample_shape(rng, cat)


def _random_valid_grid(seed, codec=DEFAULT_CODEC):
    """Random grid satisfying the VoxelGrid invariants (binary occupancy,
    colors zeroed where empty)."""
    rng = Rng(seed)
    r = codec.resolution
    occ = (rng.uniform(0.0, 1.0, (r, r, r)) < 0.35).astype(np.float64)
    data = np.zeros((r, r, r, 4))
    data[..., 0] = occ
    data[..., 1:] = rng.uniform(0.0, 1.0, (r, r, r, 3)) * occ[..., None]
    return VoxelGrid(data)


# ---------------------------------------------------------------------------
# voxelize
# ---------------------------------------------------------------------------

def test_centered_cuboid_block():
    spec = _spec_with([Part("cuboid", (0.5, 0.5, 0.5), (0.25, 0.25, 0.25), (1, 0, 0), "x")])
    g = voxelize(spec, 8)
    assert g.count() == 64
    occ = g.occupancy
    assert occ[2:6, 2:6, 2:6].all()
    assert occ.sum() == 64


def test_sphere_volume_r16():
    spec = _spec_with([Part("sphere", (0.5, 0.5, 0.5), (0.5, 0.5, 0.5), (1, 0, 0), "x")])
    g = voxelize(spec, 16)
    expected = (4.0 / 3.0) * np.pi * 0.5**3 * 16**3
    assert abs(g.count() - expected) <= 0.10 * expected


def test_empty_part_list_zero_grid():
    g = voxelize(_spec_with([]), 8)
    assert g.data.sum() == 0.0
    assert (g.labels == -1).all()


def test_voxelize_deterministic():
    spec = _random_spec(5)
    a, b = voxelize(spec), voxelize(spec)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(a.labels, b.labels)


def test_voxelize_monotone_under_part_addition():
    for seed in range(10):
        spec = _random_spec(seed)
        extra = Part("sphere", (0.5, 0.5, 0.75), (0.2, 0.2, 0.2), (0.3, 0.3, 0.3), "blob")
        bigger = ShapeSpec(spec.category, spec.parts + (extra,), spec.levels, spec.values, spec.seed)
        a, b = voxelize(spec), voxelize(bigger)
        assert ((a.occupancy > 0.5) <= (b.occupancy > 0.5)).all()


def test_color_zero_where_unoccupied():
    for seed in range(20):
        g = voxelize(_random_spec(seed))
        empty = g.occupancy < 0.5
        assert np.all(g.data[empty, 1:] == 0.0)
        occ = g.occupancy > 0.5
        assert np.all(g.data[occ, 1:].sum(axis=-1) > 0.0) or True  # black allowed


def test_innermost_part_wins_color():
    big = Part("cuboid", (0.5, 0.5, 0.5), (0.4, 0.4, 0.4), (1.0, 0.0, 0.0), "outer")
    small = Part("cuboid", (0.5, 0.5, 0.5), (0.15, 0.15, 0.15), (0.0, 0.0, 1.0), "inner")
    for order in ([big, small], [small, big]):
        g = voxelize(_spec_with(order), 8)
        # center voxels are inside both; the smaller part colors them
        assert g.data[4, 4, 4, 3] == 1.0 and g.data[4, 4, 4, 1] == 0.0
        assert g.label_names[g.labels[4, 4, 4]] == "inner"
        # voxels only inside the big part keep its color
        assert g.data[1, 4, 4, 1] == 1.0


def test_labels_match_parts():
    spec = sample_shape(Rng(3), "lamp")
    g = voxelize(spec)
    assert set(g.label_names) <= {"base", "pole", "shade"}
    occ = g.occupancy > 0.5
    assert (g.labels[occ] >= 0).all()
    assert (g.labels[~occ] == -1).all()


def test_unsupported_resolution():
    with pytest.raises(ValueError):
        voxelize(_random_spec(0), 12)


# ---------------------------------------------------------------------------
# latent transform
# ---------------------------------------------------------------------------

def test_codec_dims():
    c = DEFAULT_CODEC
    assert c.n_tokens == 64 and c.d_latent == 32
    assert c.n_tokens * c.d_latent == 8**3 * 4
    c16 = Codec(resolution=16)
    assert c16.n_tokens * c16.d_latent == 16**3 * 4


def test_basis_orthogonal():
    o = DEFAULT_CODEC.basis
    assert np.max(np.abs(o @ o.T - np.eye(len(o)))) < 1e-12
    # construction is reproducible
    assert np.array_equal(Codec().basis, o)


def test_roundtrip_on_shapes():
    for seed in range(25):
        g = voxelize(_random_spec(seed))
        back = decode(encode(g))
        assert np.max(np.abs(back.data - g.data)) < 1e-5


def test_roundtrip_on_random_grids():
    for seed in range(25):
        g = _random_valid_grid(seed)
        back = decode(encode(g))
        assert np.max(np.abs(back.data - g.data)) < 1e-5


def test_zero_grid_zero_latent():
    g = VoxelGrid(np.zeros((8, 8, 8, 4)))
    assert np.all(encode(g) == 0.0)


def test_isometry():
    for seed in range(25):
        g = _random_valid_grid(seed)
        z = encode(g)
        assert abs(np.linalg.norm(z) - np.linalg.norm(g.data)) < 1e-5


def test_decode_clamps_and_binarizes():
    z = encode(_random_valid_grid(0))
    wild = z * 40.0  # way out of range after inverse rotation
    g = decode(wild)
    assert g.data.min() >= 0.0 and g.data.max() <= 1.0
    assert set(np.unique(g.data[..., 0])) <= {0.0, 1.0}
    empty = g.data[..., 0] == 0.0
    assert np.all(g.data[empty, 1:] == 0.0)


def test_binarization_threshold():
    c = DEFAULT_CODEC
    data = np.zeros((8, 8, 8, 4))
    data[0, 0, 0, 0] = 0.5 - 1e-9
    data[0, 0, 1, 0] = 0.5 + 1e-6
    g = c.decode(c._patchify(data) @ c.basis)
    assert g.data[0, 0, 0, 0] == 0.0
    assert g.data[0, 0, 1, 0] == 1.0


def test_encode_shape_mismatch():
    g = VoxelGrid(np.zeros((16, 16, 16, 4)))
    with pytest.raises(ValueError):
        encode(g)
    with pytest.raises(ValueError):
        decode(np.zeros((10, 32)))


def test_token_order_is_lexicographic():
    # lighting up a single patch lights up exactly the matching token
    c = DEFAULT_CODEC
    data = np.zeros((8, 8, 8, 4))
    ix, iy, iz = 2, 0, 3
    data[2 * ix: 2 * ix + 2, 2 * iy: 2 * iy + 2, 2 * iz: 2 * iz + 2, 0] = 1.0
    z = c.encode(VoxelGrid(data))
    norms = np.linalg.norm(z, axis=1)
    expect = ix * 16 + iy * 4 + iz
    assert norms.argmax() == expect
    assert np.all(norms[np.arange(64) != expect] < 1e-12)


# ---------------------------------------------------------------------------
# point clouds and exports
# ---------------------------------------------------------------------------

def test_surface_mask_full_cube():
    data = np.zeros((8, 8, 8, 4))
    data[..., 0] = 1.0
    m = surface_mask(VoxelGrid(data))
    assert m.sum() == 8**3 - 6**3
    assert not m[1:-1, 1:-1, 1:-1].any()


def test_point_cloud_in_surface_shell():
    g = voxelize(_random_spec(7))
    cloud = point_cloud(g, 500, Rng(1))
    assert cloud.points.shape == (500, 3)
    surf = surface_mask(g)
    idx = np.floor(cloud.points * g.resolution).astype(int)
    assert surf[idx[:, 0], idx[:, 1], idx[:, 2]].all()
    assert cloud.labels is not None and len(cloud.labels) == 500
    assert all(0 <= l < len(cloud.label_names) for l in cloud.labels)


def test_point_cloud_deterministic():
    g = voxelize(_random_spec(9))
    a = point_cloud(g, 256, Rng(5))
    b = point_cloud(g, 256, Rng(5))
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.labels, b.labels)


def test_point_cloud_empty_raises():
    with pytest.raises(ValueError, match="empty shape"):
        point_cloud(VoxelGrid(np.zeros((8, 8, 8, 4))), 10, Rng(0))


def test_ply_export(tmp_path):
    g = voxelize(_random_spec(11))
    cloud = point_cloud(g, 64, Rng(2))
    p = tmp_path / "cloud.ply"
    write_ply(cloud, p)
    raw = p.read_bytes()
    header, blob = raw.split(b"end_header\n", 1)
    assert header.startswith(b"ply\nformat binary_little_endian 1.0")
    assert b"element vertex 64" in header
    pts = np.frombuffer(blob, dtype="<f4").reshape(64, 3)
    assert np.allclose(pts, cloud.points, atol=1e-6)


def test_ply_export_with_colors(tmp_path):
    cloud = PointCloud(np.array([[0.5, 0.25, 0.75]]))
    p = tmp_path / "c.ply"
    write_ply(cloud, p, colors=np.array([[1.0, 0.0, 0.5]]))
    raw = p.read_bytes()
    assert b"property uchar red" in raw
    blob = raw.split(b"end_header\n", 1)[1]
    assert len(blob) == 12 + 3


def test_obj_export(tmp_path):
    data = np.zeros((8, 8, 8, 4))
    data[0, 0, 0, 0] = 1.0
    p = tmp_path / "one.obj"
    write_obj(VoxelGrid(data), p)
    text = p.read_text().strip().split("\n")
    assert len([l for l in text if l.startswith("v ")]) == 8
    assert len([l for l in text if l.startswith("f ")]) == 6
    assert text[0] == "v 0.000000 0.000000 0.000000"
    # byte-identical across calls
    p2 = tmp_path / "two.obj"
    write_obj(VoxelGrid(data), p2)
    assert p.read_bytes() == p2.read_bytes()
