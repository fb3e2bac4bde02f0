"""File output helpers: atomic writes, OBJ meshes, legacy-VTK grids, CSV."""

import os
import tempfile

import numpy as np


def atomic_write_text(path, text):
    """Write text to path via a temp file + rename, so readers never see partial files."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_obj(path, vertices, faces):
    """Export a triangle mesh as Wavefront OBJ (1-based face indices)."""
    lines = []
    for v in np.asarray(vertices):
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for f in np.asarray(faces, dtype=np.int64):
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_vtk_grid(path, grid, cell_scalars=None, point_vectors=None, point_scalars=None):
    """Legacy-VTK STRUCTURED_POINTS dump of a voxel grid with optional fields.

    cell_scalars / point_scalars: dict name -> flat array (x-fastest).
    point_vectors: dict name -> (n_points, 3) array.
    """
    nx, ny, nz = grid.dims
    lines = [
        "# vtk DataFile Version 3.0",
        "voxelast grid",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
        f"ORIGIN {float(grid.origin[0])!r} {float(grid.origin[1])!r} {float(grid.origin[2])!r}",
        f"SPACING {float(grid.spacing)!r} {float(grid.spacing)!r} {float(grid.spacing)!r}",
    ]

    def flat(a):
        return np.asarray(a, dtype=np.float64).reshape(-1)

    n_pts = (nx + 1) * (ny + 1) * (nz + 1)
    if point_scalars or point_vectors:
        lines.append(f"POINT_DATA {n_pts}")
    for name, data in (point_scalars or {}).items():
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(repr(float(v)) for v in flat(data))
    for name, data in (point_vectors or {}).items():
        lines.append(f"VECTORS {name} double")
        arr = np.asarray(data, dtype=np.float64).reshape(-1, 3)
        lines.extend(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}" for v in arr)
    if cell_scalars:
        lines.append(f"CELL_DATA {nx * ny * nz}")
        for name, data in cell_scalars.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(repr(float(v)) for v in flat(data))
    atomic_write_text(path, "\n".join(lines) + "\n")
