"""Voxel rasterizer and the exact, invertible voxel<->latent transform.

The latent side of the pipeline is a fixed linear isometry rather than a
learned autoencoder: the grid is cut into 2^3 patches, each patch flattened
to a D-vector (D = 8 * 4 channels = 32) and rotated by a seeded orthogonal
matrix. decode is the transpose, so every latent-space quantity can be
checked in voxel space to numerical precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import Rng
from .shapegen import Part, ShapeSpec

__all__ = [
    "VoxelGrid",
    "PointCloud",
    "Codec",
    "DEFAULT_CODEC",
    "CODEC_SEED",
    "voxelize",
    "encode",
    "decode",
    "point_cloud",
    "write_ply",
    "write_obj",
]

# Fixed seed for the orthogonal token basis; recorded in checkpoints so a
# model is never paired with a basis it was not trained under.
CODEC_SEED = 7310


@dataclass
class VoxelGrid:
    """(R, R, R, 4) float array: occupancy then RGB, all in [0, 1].

    ``labels`` (when present) holds per-voxel part indices into
    ``label_names``; -1 marks empty voxels. Decoded grids carry no labels.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    label_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[3] != 4:
            raise ValueError(f"voxel grid must be (R,R,R,4), got {self.data.shape}")
        r = self.data.shape[0]
        if self.data.shape[:3] != (r, r, r):
            raise ValueError("voxel grid must be cubic")

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def occupancy(self) -> np.ndarray:
        return self.data[..., 0]

    def count(self) -> int:
        return int(np.sum(self.data[..., 0] > 0.5))


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) in [0,1]^3
    labels: np.ndarray | None = None  # (N,) indices into label_names
    label_names: tuple[str, ...] = ()


def _centers(resolution: int) -> np.ndarray:
    # voxel centers at (i + 0.5) / R per axis, shape (R,R,R,3)
    ax = (np.arange(resolution) + 0.5) / resolution
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def _inside(part: Part, centers: np.ndarray) -> np.ndarray:
    """Boolean mask of voxel centers inside the part (boundary inclusive)."""
    d = np.abs(centers - np.asarray(part.center))
    h = np.asarray(part.half_extents)
    if part.primitive == "cuboid":
        return np.all(d <= h, axis=-1)
    if part.primitive == "sphere":
        return np.sum((d / h) ** 2, axis=-1) <= 1.0
    # cylinder: elliptical cross-section in xy, slab in z
    radial = (d[..., 0] / h[0]) ** 2 + (d[..., 1] / h[1]) ** 2
    return (radial <= 1.0) & (d[..., 2] <= h[2])


def _volume(part: Part) -> float:
    hx, hy, hz = part.half_extents
    if part.primitive == "cuboid":
        return 8.0 * hx * hy * hz
    if part.primitive == "sphere":
        return (4.0 / 3.0) * np.pi * hx * hy * hz
    return 2.0 * np.pi * hx * hy * hz


def voxelize(spec: ShapeSpec, resolution: int = 8) -> VoxelGrid:
    """Rasterize a spec; a voxel is occupied iff its center lies in a part.

    Where parts overlap, color and label come from the innermost covering
    part, i.e. the most specific one: smallest volume, ties toward the later
    part in the list.
    """
    if resolution not in (8, 16):
        raise ValueError(f"unsupported resolution {resolution}")
    centers = _centers(resolution)
    data = np.zeros((resolution,) * 3 + (4,), dtype=np.float64)
    labels = np.full((resolution,) * 3, -1, dtype=np.int32)
    names: list[str] = []
    best = np.full((resolution,) * 3, np.inf)
    for part in spec.parts:
        inside = _inside(part, centers)
        vol = _volume(part)
        take = inside & (vol <= best)
        if not np.any(take):
            continue
        if part.label not in names:
            names.append(part.label)
        data[take, 0] = 1.0
        data[take, 1] = part.color[0]
        data[take, 2] = part.color[1]
        data[take, 3] = part.color[2]
        labels[take] = names.index(part.label)
        best = np.where(take, vol, best)
    return VoxelGrid(data, labels, tuple(names))


# ---------------------------------------------------------------------------
# Latent transform
# ---------------------------------------------------------------------------

class Codec:
    """Patch + seeded-orthogonal-rotation latent transform.

    tokens = S x D with S = (R/p)^3 and D = p^3 * 4; token order is
    lexicographic over patch indices (ix, iy, iz) and each patch is
    flattened C-order over (dx, dy, dz, channel).
    """

    def __init__(self, resolution: int = 8, patch: int = 2, seed: int = CODEC_SEED):
        if resolution % patch:
            raise ValueError("patch must divide resolution")
        self.resolution = resolution
        self.patch = patch
        self.seed = seed
        self.n_tokens = (resolution // patch) ** 3
        self.d_latent = patch**3 * 4
        g = Rng(seed).normal((self.d_latent, self.d_latent), dtype=np.float64)
        q, r = np.linalg.qr(g)
        # fix signs so the factorization (and hence O) is platform-stable
        self.basis = q * np.sign(np.diag(r))

    def config(self) -> dict:
        return {"resolution": self.resolution, "patch": self.patch, "seed": self.seed}

    def _patchify(self, data: np.ndarray) -> np.ndarray:
        r, p = self.resolution, self.patch
        m = r // p
        x = data.reshape(m, p, m, p, m, p, 4)
        x = x.transpose(0, 2, 4, 1, 3, 5, 6)
        return x.reshape(self.n_tokens, self.d_latent)

    def _unpatchify(self, tokens: np.ndarray) -> np.ndarray:
        r, p = self.resolution, self.patch
        m = r // p
        x = tokens.reshape(m, m, m, p, p, p, 4)
        x = x.transpose(0, 3, 1, 4, 2, 5, 6)
        return x.reshape(r, r, r, 4)

    def encode(self, grid: VoxelGrid) -> np.ndarray:
        if grid.resolution != self.resolution:
            raise ValueError(
                f"grid resolution {grid.resolution} != codec resolution {self.resolution}")
        return self._patchify(np.asarray(grid.data, dtype=np.float64)) @ self.basis

    def decode(self, tokens: np.ndarray) -> VoxelGrid:
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.shape != (self.n_tokens, self.d_latent):
            raise ValueError(
                f"latent shape {tokens.shape} != ({self.n_tokens}, {self.d_latent})")
        data = np.clip(self._unpatchify(tokens @ self.basis.T), 0.0, 1.0)
        occ = (data[..., 0] > 0.5).astype(np.float64)
        data[..., 0] = occ
        data[..., 1:] *= occ[..., None]
        return VoxelGrid(data)


DEFAULT_CODEC = Codec()


def encode(grid: VoxelGrid, codec: Codec = DEFAULT_CODEC) -> np.ndarray:
    return codec.encode(grid)


def decode(tokens: np.ndarray, codec: Codec = DEFAULT_CODEC) -> VoxelGrid:
    return codec.decode(tokens)


# ---------------------------------------------------------------------------
# Point sampling and exports
# ---------------------------------------------------------------------------

def surface_mask(grid: VoxelGrid) -> np.ndarray:
    """Occupied voxels with at least one empty 6-neighbor (outside = empty)."""
    occ = grid.data[..., 0] > 0.5
    padded = np.pad(occ, 1, constant_values=False)
    interior = np.ones_like(occ)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return occ & ~interior


def point_cloud(grid: VoxelGrid, n: int = 1024, rng: Rng | None = None) -> PointCloud:
    """n points uniform over surface voxels, jittered inside each voxel."""
    if rng is None:
        rng = Rng(0)
    surf = np.argwhere(surface_mask(grid))
    if len(surf) == 0:
        raise ValueError("empty shape")
    r = grid.resolution
    pick = rng.integers(0, len(surf), (n,))
    jitter = rng.uniform(0.0, 1.0, (n, 3))
    points = (surf[pick] + jitter) / r
    labels = None
    if grid.labels is not None:
        labels = grid.labels[surf[pick, 0], surf[pick, 1], surf[pick, 2]]
    return PointCloud(points, labels, grid.label_names)


def write_ply(cloud: PointCloud, path: str | Path, colors: np.ndarray | None = None) -> None:
    """Binary little-endian PLY: float32 x,y,z (+ uchar r,g,b if given)."""
    n = len(cloud.points)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        pts = np.asarray(cloud.points, dtype="<f4")
        if colors is None:
            fh.write(pts.tobytes())
        else:
            rgb = np.clip(np.asarray(colors) * 255.0, 0, 255).astype(np.uint8)
            for i in range(n):
                fh.write(pts[i].tobytes())
                fh.write(rgb[i].tobytes())


def write_obj(grid: VoxelGrid, path: str | Path) -> None:
    """One cube per occupied voxel, lexicographic voxel order, quad faces,
    8 vertices per cube (no sharing), coordinates printed with 6 decimals."""
    occ = np.argwhere(grid.data[..., 0] > 0.5)
    r = grid.resolution
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
                        [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=np.float64)
    quads = [(1, 2, 4, 3), (5, 6, 8, 7), (1, 2, 6, 5), (3, 4, 8, 7), (1, 3, 7, 5), (2, 4, 8, 6)]
    lines = []
    for k, idx in enumerate(occ):
        for c in corners:
            v = (idx + c) / r
            lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
        base = 8 * k
        for q in quads:
            lines.append("f " + " ".join(str(base + i) for i in q))
    Path(path).write_text("\n".join(lines) + "\n")
