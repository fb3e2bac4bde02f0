"""Reference unit hexahedron: trilinear shape functions and their derivatives.

Corners are ordered x-fastest: corner j has offsets
(j & 1, (j >> 1) & 1, (j >> 2) & 1).  All coordinates live in [0, 1]^3.
"""

import numpy as np

CORNERS = np.array(
    [[(j >> a) & 1 for a in range(3)] for j in range(8)], dtype=np.float64
)  # (8, 3)

# Gradient of the 8 shape functions at the cell center: each component is
# +-1/4 depending on the corner bit.  shape (8, 3); center_grad = phi @ CENTER_GRAD
CENTER_GRAD = 0.25 * (2.0 * CORNERS - 1.0)


def shape_values(points):
    """Trilinear shape function values N_j at points (..., 3) -> (..., 8)."""
    p = np.asarray(points, dtype=np.float64)
    axes = np.where(CORNERS > 0.5, p[..., None, :], 1.0 - p[..., None, :])
    return axes.prod(axis=-1)


def shape_gradients(points):
    """Gradients dN_j/dx at points (..., 3) -> (..., 8, 3)."""
    p = np.asarray(points, dtype=np.float64)
    vals = np.where(CORNERS > 0.5, p[..., None, :], 1.0 - p[..., None, :])  # (...,8,3)
    signs = 2.0 * CORNERS - 1.0
    grads = np.empty(p.shape[:-1] + (8, 3), dtype=np.float64)
    for a in range(3):
        others = [b for b in range(3) if b != a]
        grads[..., a] = signs[:, a] * vals[..., others[0]] * vals[..., others[1]]
    return grads


def shape_hessians(points):
    """Second derivatives d2N_j/dx_a dx_b at points (..., 3) -> (..., 8, 3, 3).

    Trilinear functions have zero pure second derivatives; only mixed terms
    survive.
    """
    p = np.asarray(points, dtype=np.float64)
    vals = np.where(CORNERS > 0.5, p[..., None, :], 1.0 - p[..., None, :])
    signs = 2.0 * CORNERS - 1.0
    hess = np.zeros(p.shape[:-1] + (8, 3, 3), dtype=np.float64)
    for a in range(3):
        for b in range(a + 1, 3):
            c = 3 - a - b
            h = signs[:, a] * signs[:, b] * vals[..., c]
            hess[..., a, b] = h
            hess[..., b, a] = h
    return hess


def interpolate(corner_values, points):
    """Trilinear interpolation of per-corner values (..., 8) at points (..., 3)."""
    return np.einsum("...j,...j->...", np.asarray(corner_values), shape_values(points))
