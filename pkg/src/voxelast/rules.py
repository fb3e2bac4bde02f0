"""Per-cell quadrature rule generation for the active cells of a grid.

Full cells always get the closed-form Gauss-Legendre rule; the source tag
controls how boundary cells are treated.
"""

from dataclasses import dataclass

import numpy as np

from . import quadnet
from .grid import CELL_BOUNDARY, cell_corner_values
from .quadrature import TestBasis, gauss_legendre_rule, ground_truth_batch, moment_fit_weights

SOURCES = ("full", "clip", "neural", "moment_fit")


@dataclass
class CellRules:
    """Quadrature points/weights for each active cell (same point count)."""

    cells: np.ndarray  # active cell ids, sorted
    points: np.ndarray  # (n_active, n_Q, 3)
    weights: np.ndarray  # (n_active, n_Q)
    source: str
    order: int
    neural_mask: np.ndarray  # active cells whose rule depends on the SDF corners

    @property
    def n_points(self):
        return self.points.shape[1]


def build_cell_rules(grid, classification, source, order=2, net=None, oracle_res=32):
    """Build rules for all active (non-empty) cells of a classified grid."""
    if source not in SOURCES:
        raise ValueError(f"unknown quadrature source {source!r}")
    cells = classification.active
    base = gauss_legendre_rule(order)
    n_active = cells.size
    points = np.broadcast_to(base.points, (n_active, base.n_points, 3)).copy()
    weights = np.broadcast_to(base.weights, (n_active, base.n_points)).copy()
    neural_mask = np.zeros(n_active, dtype=bool)
    if n_active == 0:
        return CellRules(cells, points, weights, source, order, neural_mask)

    is_boundary = classification.tags[cells] == CELL_BOUNDARY
    if source == "full" or not np.any(is_boundary):
        return CellRules(cells, points, weights, source, order, neural_mask)

    corner_phi = cell_corner_values(grid)[cells[is_boundary]]
    if source == "clip":
        from . import hexa

        inside = hexa.interpolate(corner_phi[:, None, :], points[is_boundary]) < 0.0
        weights[is_boundary] *= inside
    elif source == "neural":
        if net is None:
            raise ValueError("neural quadrature source requires network parameters")
        if net.order != order:
            raise ValueError(f"network order {net.order} != requested order {order}")
        pts, wts = quadnet.forward(net, corner_phi)
        points[is_boundary] = pts
        weights[is_boundary] = wts
        neural_mask[is_boundary] = True
    elif source == "moment_fit":
        basis = TestBasis(order)
        gt = ground_truth_batch(corner_phi, basis, oracle_res)
        for row, idx in zip(np.flatnonzero(is_boundary), range(corner_phi.shape[0])):
            rule = moment_fit_weights(corner_phi[idx], basis, gt=gt[idx])
            weights[row] = rule.weights
    return CellRules(cells, points, weights, source, order, neural_mask)
