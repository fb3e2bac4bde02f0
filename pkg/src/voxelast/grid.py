"""Voxel grids of nodal signed-distance values.

The implicit material domain is the region where the trilinearly
interpolated field is negative.  Cells are classified Full / Empty /
Boundary from corner signs; smoothing and mirror preconditioners operate on
nodal fields as exact linear maps (with exact transposes for gradient
chains).
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import hexa
from .io import atomic_write_bytes, atomic_write_text, write_obj

CELL_EMPTY = 0
CELL_FULL = 1
CELL_BOUNDARY = 2

_MAGIC_BIN = b"VXGRID01"


@dataclass
class VoxelGrid:
    """Regular lattice of nodal SDF values (negative inside material)."""

    dims: tuple  # cells per axis
    spacing: float
    phi: np.ndarray  # (nx+1, ny+1, nz+1)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        expected = tuple(d + 1 for d in self.dims)
        if self.phi.shape != expected:
            raise ValueError(f"phi shape {self.phi.shape} != node shape {expected}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("phi contains non-finite values")

    @property
    def n_cells(self):
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def node_shape(self):
        return tuple(d + 1 for d in self.dims)

    def node_positions(self):
        """World coordinates of all nodes, shape (*node_shape, 3)."""
        axes = [self.origin[a] + self.spacing * np.arange(self.dims[a] + 1) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_phi(self, phi):
        return replace(self, phi=np.asarray(phi, dtype=np.float64))


def make_grid(dims, spacing, origin=(0.0, 0.0, 0.0), fill=1.0):
    shape = tuple(d + 1 for d in dims)
    return VoxelGrid(dims, spacing, np.full(shape, float(fill)), np.asarray(origin, float))


def cell_corner_values(grid):
    """Gather the 8 corner values of every cell -> (n_cells, 8), x-fastest cells."""
    p = grid.phi
    nx, ny, nz = grid.dims
    corners = np.empty((nx, ny, nz, 8))
    for j in range(8):
        dx, dy, dz = (j >> 0) & 1, (j >> 1) & 1, (j >> 2) & 1
        corners[..., j] = p[dx : nx + dx, dy : ny + dy, dz : nz + dz]
    # cells flattened x-fastest
    return corners.reshape(nx * ny * nz, 8, order="F")


@dataclass
class CellClassification:
    tags: np.ndarray  # flat (n_cells,) int8, x-fastest
    full: np.ndarray
    boundary: np.ndarray
    empty: np.ndarray

    @property
    def active(self):
        return np.sort(np.concatenate([self.full, self.boundary]))


def classify_cells(grid):
    """Partition cells into Full (all corners < 0), Empty (all >= 0), Boundary."""
    corners = cell_corner_values(grid)
    neg = corners < 0.0
    all_neg = neg.all(axis=1)
    any_neg = neg.any(axis=1)
    tags = np.full(corners.shape[0], CELL_BOUNDARY, dtype=np.int8)
    tags[all_neg] = CELL_FULL
    tags[~any_neg] = CELL_EMPTY
    idx = np.arange(tags.size)
    return CellClassification(
        tags=tags,
        full=idx[tags == CELL_FULL],
        boundary=idx[tags == CELL_BOUNDARY],
        empty=idx[tags == CELL_EMPTY],
    )


def cell_index_to_ijk(grid, idx):
    nx, ny, _ = grid.dims
    idx = np.asarray(idx)
    return np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=-1)


def sample_sdf(grid, x):
    """Trilinear interpolation of the nodal field at world points (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    local = (x - grid.origin) / grid.spacing
    dims = np.asarray(grid.dims)
    eps = 1e-12
    if np.any(local < -eps) or np.any(local > dims + eps):
        raise ValueError("sample point outside grid bounds")
    cell = np.clip(np.floor(local).astype(np.int64), 0, dims - 1)
    frac = local - cell
    corners = np.empty(x.shape[:-1] + (8,))
    for j in range(8):
        off = [(j >> a) & 1 for a in range(3)]
        corners[..., j] = grid.phi[
            cell[..., 0] + off[0], cell[..., 1] + off[1], cell[..., 2] + off[2]
        ]
    return hexa.interpolate(corners, frac)


@dataclass
class SmoothingConfig:
    """Truncated-Gaussian blur (replicate boundary) plus optional mirror averaging."""

    sigma: float = 1.0  # in cells
    kernel_radius: int = 3
    symmetry_axis: int | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.kernel_radius < 0:
            raise ValueError("kernel_radius must be >= 0")


def _blur_matrix(n, sigma, radius):
    """Dense n x n matrix of a truncated, renormalized 1D Gaussian with replicate padding."""
    if sigma == 0.0 or radius == 0:
        return np.eye(n)
    offsets = np.arange(-radius, radius + 1)
    kern = np.exp(-0.5 * (offsets / sigma) ** 2)
    kern /= kern.sum()
    m = np.zeros((n, n))
    for i in range(n):
        src = np.clip(i + offsets, 0, n - 1)
        np.add.at(m[i], src, kern)
    return m


def _mirror_matrix(n):
    m = 0.5 * (np.eye(n) + np.eye(n)[::-1])
    return m


def _apply_axis(field3d, mat, axis):
    return np.moveaxis(np.tensordot(mat, np.moveaxis(field3d, axis, 0), axes=(1, 0)), 0, axis)


def gaussian_precondition(raw, cfg, transpose=False):
    """Separable truncated-Gaussian smoothing of a nodal field (linear in the input).

    Mirror averaging across cfg.symmetry_axis happens before blurring.  With
    transpose=True apply the exact adjoint (for gradient chain rules).
    """
    out = np.asarray(raw, dtype=np.float64)
    mats = []
    if cfg.symmetry_axis is not None:
        mats.append((cfg.symmetry_axis, _mirror_matrix(out.shape[cfg.symmetry_axis])))
    for axis in range(3):
        mats.append((axis, _blur_matrix(out.shape[axis], cfg.sigma, cfg.kernel_radius)))
    if transpose:
        mats = [(a, m.T) for a, m in reversed(mats)]
    for axis, m in mats:
        out = _apply_axis(out, m, axis)
    return out


def extract_isosurface(grid):
    """Marching-cubes triangulation of the zero isosurface, in world coordinates.

    Visualization/export only; empty mesh when the field has no sign change.
    """
    from skimage import measure

    phi = grid.phi
    if phi.min() >= 0.0 or phi.max() < 0.0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    verts, faces, _, _ = measure.marching_cubes(phi, level=0.0, spacing=(grid.spacing,) * 3)
    return verts + grid.origin, faces.astype(np.int64)


def save_isosurface_obj(path, grid, displacement=None):
    """Export the zero isosurface as OBJ, optionally advected by a displacement field.

    displacement: callable mapping world points (n, 3) -> (n, 3), e.g. an
    interpolated FEM solution.
    """
    verts, faces = extract_isosurface(grid)
    if displacement is not None and len(verts):
        verts = verts + displacement(verts)
    write_obj(path, verts, faces)


def save_grid_text(path, grid):
    nx, ny, nz = grid.dims
    lines = [
        f"dims {nx} {ny} {nz}",
        f"spacing {float(grid.spacing)!r}",
        f"origin {float(grid.origin[0])!r} {float(grid.origin[1])!r} {float(grid.origin[2])!r}",
    ]
    lines.extend(repr(float(v)) for v in grid.phi.reshape(-1, order="F"))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_grid_text(path):
    with open(path) as f:
        tokens = f.read().split()
    if tokens[0] != "dims":
        raise ValueError("bad grid file: missing dims header")
    dims = tuple(int(t) for t in tokens[1:4])
    if tokens[4] != "spacing":
        raise ValueError("bad grid file: missing spacing header")
    spacing = float(tokens[5])
    if tokens[6] != "origin":
        raise ValueError("bad grid file: missing origin header")
    origin = np.array([float(t) for t in tokens[7:10]])
    vals = np.array([float(t) for t in tokens[10:]])
    shape = tuple(d + 1 for d in dims)
    if vals.size != np.prod(shape):
        raise ValueError("bad grid file: wrong number of nodal values")
    return VoxelGrid(dims, spacing, vals.reshape(shape, order="F"), origin)


def save_grid_binary(path, grid):
    header = _MAGIC_BIN + struct.pack(
        "<3i4d", *grid.dims, grid.spacing, *(float(o) for o in grid.origin)
    )
    payload = grid.phi.reshape(-1, order="F").astype("<f8").tobytes()
    atomic_write_bytes(path, header + payload)


def load_grid_binary(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC_BIN:
        raise ValueError("bad grid file: magic mismatch")
    nx, ny, nz, spacing, ox, oy, oz = struct.unpack("<3i4d", data[8 : 8 + 44])
    shape = (nx + 1, ny + 1, nz + 1)
    vals = np.frombuffer(data[8 + 44 :], dtype="<f8")
    if vals.size != np.prod(shape):
        raise ValueError("bad grid file: truncated payload")
    return VoxelGrid((nx, ny, nz), spacing, vals.reshape(shape, order="F").copy(), (ox, oy, oz))
