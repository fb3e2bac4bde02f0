"""Quadrature rules on the unit voxel and implicit-domain moment fitting.

Provides tensor-product Gauss-Legendre rules, the Lagrange test basis on
Lobatto-Gauss-Legendre nodes, a brute-force ground-truth integrator for
trilinearly-interpolated corner fields, the Clip and weight-only
moment-fitting baselines, and the moment-mismatch error functional.
"""

from dataclasses import dataclass, field

import numpy as np

from . import hexa

SUPPORTED_ORDERS = (2, 4)


def _check_order(d):
    if d not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported quadrature order {d}; expected one of {SUPPORTED_ORDERS}")


def _legendre_and_deriv(n, x):
    """Legendre P_n and P_n' on [-1, 1] via the three-term recurrence."""
    p0 = np.ones_like(x)
    if n == 0:
        return p0, np.zeros_like(x)
    p1 = x
    for k in range(1, n):
        p0, p1 = p1, ((2 * k + 1) * x * p1 - k * p0) / (k + 1)
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    return p1, dp


def gauss_legendre_1d(n):
    """n-point Gauss-Legendre nodes/weights on [0, 1], by Newton iteration."""
    # Chebyshev initial guesses, refined on P_n roots to ~1e-15
    k = np.arange(1, n + 1)
    x = np.cos(np.pi * (k - 0.25) / (n + 0.5))
    for _ in range(100):
        p, dp = _legendre_and_deriv(n, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    _, dp = _legendre_and_deriv(n, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return (x[order] + 1.0) / 2.0, w[order] / 2.0


def lobatto_1d(n):
    """n-point Lobatto-Gauss-Legendre nodes on [0, 1] (endpoints included)."""
    if n < 2:
        raise ValueError("Lobatto rules need at least 2 nodes")
    if n == 2:
        return np.array([0.0, 1.0])
    # interior nodes are roots of P'_{n-1}
    m = n - 1
    k = np.arange(1, m)
    x = np.cos(np.pi * k / m)  # good initial guesses
    for _ in range(100):
        _, dp = _legendre_and_deriv(m, x)
        # Newton on dp: need second derivative, from the Legendre ODE
        p, _ = _legendre_and_deriv(m, x)
        d2p = (2.0 * x * dp - m * (m + 1) * p) / (1.0 - x * x)
        dx = dp / d2p
        x = x - dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    nodes = np.concatenate([[-1.0], np.sort(x), [1.0]])
    return (nodes + 1.0) / 2.0


@dataclass
class QuadratureRule:
    """Points in the unit cube and unit-cube volume-fraction weights."""

    points: np.ndarray  # (n_Q, 3)
    weights: np.ndarray  # (n_Q,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.points.shape != (self.weights.size, 3):
            raise ValueError("points/weights shape mismatch")

    @property
    def n_points(self):
        return self.weights.size

    def total_weight(self):
        return float(self.weights.sum())


def gauss_legendre_rule(d):
    """Tensor-product Gauss-Legendre rule of order d on the unit voxel."""
    _check_order(d)
    x1, w1 = gauss_legendre_1d(d // 2 + 1)
    n = x1.size
    pts = np.stack(np.meshgrid(x1, x1, x1, indexing="ij"), axis=-1)
    # x-fastest flattening to match corner conventions
    pts = pts.transpose(2, 1, 0, 3).reshape(-1, 3)
    wts = np.einsum("i,j,k->kji", w1, w1, w1).reshape(-1)
    return QuadratureRule(pts, wts)


class TestBasis:
    """Tensor-product Lagrange polynomials on 1D Lobatto-Gauss-Legendre nodes.

    The basis of order d has (d+1)^3 members; member (i, j, k) is flattened
    x-fastest to index i + (d+1)*(j + (d+1)*k).
    """

    __test__ = False  # keep pytest from collecting this as a test class

    def __init__(self, d):
        _check_order(d)
        self.order = d
        self.nodes_1d = lobatto_1d(d + 1)
        n = d + 1
        self.n_1d = n
        self.n_polys = n**3
        diffs = self.nodes_1d[:, None] - self.nodes_1d[None, :]
        np.fill_diagonal(diffs, 1.0)
        self._denoms = diffs.prod(axis=1)  # prod_{l != i} (x_i - x_l)

    def _values_1d(self, x):
        """Lagrange values L_i(x) for all i -> (..., n_1d)."""
        x = np.asarray(x, dtype=np.float64)
        d = x[..., None] - self.nodes_1d  # (..., n)
        out = np.empty(x.shape + (self.n_1d,))
        for i in range(self.n_1d):
            prod = np.ones_like(x)
            for l in range(self.n_1d):
                if l != i:
                    prod = prod * d[..., l]
            out[..., i] = prod / self._denoms[i]
        return out

    def _derivs_1d(self, x):
        """Lagrange derivatives L_i'(x) -> (..., n_1d)."""
        x = np.asarray(x, dtype=np.float64)
        d = x[..., None] - self.nodes_1d
        out = np.zeros(x.shape + (self.n_1d,))
        for i in range(self.n_1d):
            acc = np.zeros_like(x)
            for m in range(self.n_1d):
                if m == i:
                    continue
                prod = np.ones_like(x)
                for l in range(self.n_1d):
                    if l != i and l != m:
                        prod = prod * d[..., l]
                acc = acc + prod
            out[..., i] = acc / self._denoms[i]
        return out

    def values_1d_all(self, points):
        """Per-axis 1D Lagrange values and derivatives at points (..., 3).

        Returns (vals, derivs), each a 3-tuple of (..., n_1d) arrays; the
        separable pieces let hot loops contract axis by axis instead of
        materializing the full (..., n_polys) tensor.
        """
        p = np.asarray(points, dtype=np.float64)
        vals = tuple(self._values_1d(p[..., a]) for a in range(3))
        derivs = tuple(self._derivs_1d(p[..., a]) for a in range(3))
        return vals, derivs

    def values(self, points):
        """Evaluate all basis polynomials at points (..., 3) -> (..., n_polys)."""
        p = np.asarray(points, dtype=np.float64)
        lx = self._values_1d(p[..., 0])
        ly = self._values_1d(p[..., 1])
        lz = self._values_1d(p[..., 2])
        # x-fastest flattening: member (i, j, k) -> i + n*(j + n*k)
        vals = lz[..., :, None, None] * ly[..., None, :, None] * lx[..., None, None, :]
        return vals.reshape(p.shape[:-1] + (self.n_polys,))

    def gradients(self, points):
        """Spatial gradients of all basis polynomials -> (..., n_polys, 3)."""
        p = np.asarray(points, dtype=np.float64)
        lx, ly, lz = (self._values_1d(p[..., a]) for a in range(3))
        dx, dy, dz = (self._derivs_1d(p[..., a]) for a in range(3))
        shape = p.shape[:-1] + (self.n_polys,)
        out = np.empty(shape + (3,))
        out[..., 0] = (lz[..., :, None, None] * ly[..., None, :, None] * dx[..., None, None, :]).reshape(shape)
        out[..., 1] = (lz[..., :, None, None] * dy[..., None, :, None] * lx[..., None, None, :]).reshape(shape)
        out[..., 2] = (dz[..., :, None, None] * ly[..., None, :, None] * lx[..., None, None, :]).reshape(shape)
        return out


# cache of (order, res) -> (shape values (res^3, 8), basis values (res^3, n_P))
_GT_CACHE = {}


def _gt_tables(basis, res):
    key = (basis.order, res)
    if key not in _GT_CACHE:
        h = 1.0 / res
        c1 = (np.arange(res) + 0.5) * h
        pts = np.stack(np.meshgrid(c1, c1, c1, indexing="ij"), axis=-1).reshape(-1, 3)
        _GT_CACHE[key] = (hexa.shape_values(pts), basis.values(pts))
    return _GT_CACHE[key]


def ground_truth_batch(corner_phi, basis, res=32, chunk=4096):
    """Brute-force integrals of every basis polynomial over the SDF interior.

    corner_phi: (B, 8) nodal values per cell.  A midpoint sample at x
    contributes h^3 * P(x) iff the trilinear interpolation at x is < 0.
    Returns (B, n_polys).
    """
    if res < 8:
        raise ValueError("ground-truth resolution must be >= 8")
    phi = np.atleast_2d(np.asarray(corner_phi, dtype=np.float64))
    shape_vals, basis_vals = _gt_tables(basis, res)
    h3 = 1.0 / res**3
    out = np.empty((phi.shape[0], basis.n_polys))
    for lo in range(0, phi.shape[0], chunk):
        hi = min(lo + chunk, phi.shape[0])
        inside = (phi[lo:hi] @ shape_vals.T) < 0.0  # (b, res^3)
        out[lo:hi] = (inside * h3) @ basis_vals
    return out


def ground_truth_integrals(corner_phi, basis, res=32):
    """Single-cell version of ground_truth_batch -> (n_polys,)."""
    return ground_truth_batch(np.asarray(corner_phi)[None, :], basis, res)[0]


def clip_rule(corner_phi, d):
    """Gauss-Legendre rule with weights masked by the domain indicator."""
    base = gauss_legendre_rule(d)
    inside = hexa.interpolate(np.asarray(corner_phi, dtype=np.float64), base.points) < 0.0
    return QuadratureRule(base.points, base.weights * inside, meta={"source": "clip"})


def moment_fit_weights(corner_phi, basis, res=32, gt=None):
    """Least-squares weight fit at fixed Gauss-Legendre points.

    Minimizes the moment mismatch over weights only; the result may contain
    zero or negative weights.  Targets come from the brute-force integrator
    at `res` unless precomputed integrals are passed via `gt`.
    """
    base = gauss_legendre_rule(basis.order)
    targets = gt if gt is not None else ground_truth_integrals(corner_phi, basis, res)
    m = basis.values(base.points).T  # (n_polys, n_Q)
    w, _, rank, _ = np.linalg.lstsq(m, targets, rcond=None)
    meta = {"source": "moment_fit", "rank_deficient": bool(rank < base.n_points)}
    return QuadratureRule(base.points, w, meta=meta)


def quad_error(rule, gt, basis):
    """Root-sum-square mismatch between rule moments and target integrals."""
    approx = rule.weights @ basis.values(rule.points)
    return float(np.sqrt(np.sum((np.asarray(gt) - approx) ** 2)))


def conditioning(rule):
    """Ratio of max to min quadrature weight; +inf if any weight <= 0."""
    w = rule.weights
    if w.size == 0 or np.min(w) <= 0.0:
        return np.inf
    return float(np.max(w) / np.min(w))


def dump_rules_csv(path, rules, cell_ids=None):
    """Write rules as CSV rows (cell_id, p, x, y, z, w)."""
    from .io import atomic_write_text

    lines = ["cell_id,p,x,y,z,w"]
    for i, rule in enumerate(rules):
        cid = i if cell_ids is None else cell_ids[i]
        for p in range(rule.n_points):
            x, y, z = rule.points[p]
            lines.append(f"{cid},{p},{float(x)!r},{float(y)!r},{float(z)!r},{float(rule.weights[p])!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
