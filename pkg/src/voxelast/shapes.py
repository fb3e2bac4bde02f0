"""Analytic signed-distance fields for building test geometry on grids."""

import numpy as np

from .grid import VoxelGrid


def sphere(center, radius):
    center = np.asarray(center, float)

    def sdf(x):
        return np.linalg.norm(x - center, axis=-1) - radius

    return sdf


def plane(normal, offset):
    """Half-space: negative on the side opposite the normal; phi = n.x - offset."""
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)

    def sdf(x):
        return x @ n - offset

    return sdf


def box(lo, hi):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)

    def sdf(x):
        q = np.abs(x - c) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    return sdf


def capsule(p0, p1, radius):
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    ba = p1 - p0
    bb = ba @ ba

    def sdf(x):
        t = np.clip(((x - p0) @ ba) / bb, 0.0, 1.0)
        return np.linalg.norm(x - p0 - t[..., None] * ba, axis=-1) - radius

    return sdf


def union(*sdfs):
    def sdf(x):
        return np.minimum.reduce([s(x) for s in sdfs])

    return sdf


def difference(a, b):
    def sdf(x):
        return np.maximum(a(x), -b(x))

    return sdf


def dumbbell(extent=1.0, fat_radius=0.22, thin_radius=0.10):
    """Two fat axial capsules joined by a thinner middle one, axis along x.

    Sized for a unit cube domain [0, extent]^3.
    """
    e = extent
    y = np.array([0.5 * e, 0.5 * e])
    fat1 = capsule((0.05 * e, *y), (0.30 * e, *y), fat_radius * e)
    fat2 = capsule((0.70 * e, *y), (0.95 * e, *y), fat_radius * e)
    mid = capsule((0.25 * e, *y), (0.75 * e, *y), thin_radius * e)
    return union(fat1, fat2, mid)


def beam(extent=1.0, height=0.35, depth=0.6):
    """Axis-aligned beam spanning the full x extent, centered in y/z."""
    e = extent
    return box(
        (0.0, 0.5 * e * (1 - depth), 0.5 * e * (1 - height)),
        (e, 0.5 * e * (1 + depth), 0.5 * e * (1 + height)),
    )


def slab_with_holes(extent=1.0, thickness=0.4, hole_radius=0.06, pitch=0.2):
    """Thin slab perforated by a regular array of spherical holes.

    With pitch near the cell size the heterogeneities are voxel-scale.
    """
    e = extent
    base = box((0.0, 0.0, 0.5 * e * (1 - thickness)), (e, e, 0.5 * e * (1 + thickness)))
    holes = []
    n = int(np.floor(1.0 / pitch))
    for i in range(n):
        for j in range(n):
            cx = (i + 0.5) * pitch * e
            cy = (j + 0.5) * pitch * e
            holes.append(sphere((cx, cy, 0.5 * e), hole_radius * e))
    return difference(base, union(*holes))


def discretize(sdf, dims, spacing=None, origin=(0.0, 0.0, 0.0), extent=1.0):
    """Sample an analytic SDF at grid nodes -> VoxelGrid."""
    dims = tuple(int(d) for d in dims)
    if spacing is None:
        spacing = extent / max(dims)
    origin = np.asarray(origin, float)
    axes = [origin[a] + spacing * np.arange(dims[a] + 1) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return VoxelGrid(dims, spacing, sdf(pts), origin)


NAMED_SHAPES = {
    "sphere": lambda extent: sphere((0.5 * extent,) * 3, 0.35 * extent),
    "dumbbell": dumbbell,
    "beam": beam,
    "slab_with_holes": slab_with_holes,
    "full": lambda extent: lambda x: np.full(x.shape[:-1], -extent),
}
