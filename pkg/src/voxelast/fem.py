"""Displacement-only FEM on implicit voxel grids.

Trilinear hexahedral elements are assembled cell by cell under an
arbitrary per-cell quadrature rule.  The solved problem is one implicit
Euler step of the incremental potential (quasistatic when no timestep is
given); Dirichlet constraints are enforced by eliminating fixed nodes.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import hexa
from .material import snh_energy, snh_hessian_F, snh_pk1
from .solvers import solve_spd


@dataclass
class BoxRegion:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)

    def contains(self, pts):
        pts = np.asarray(pts)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)


@dataclass
class DirichletRegion(BoxRegion):
    value: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        super().__post_init__()
        self.value = np.asarray(self.value, dtype=np.float64).reshape(3)


@dataclass
class LoadRegion(BoxRegion):
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        super().__post_init__()
        self.force = np.asarray(self.force, dtype=np.float64).reshape(3)


@dataclass
class SimSetup:
    """Timestep (None = quasistatic), body acceleration, constraints and loads."""

    dt: float | None = None
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dirichlet: list = field(default_factory=list)
    loads: list = field(default_factory=list)
    quadrature_source: str = "neural"

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive (or None for quasistatic)")


@dataclass
class DofMap:
    """Active nodes/cells and the cell -> active-node connectivity."""

    cells: np.ndarray  # active cell ids
    cell_nodes: np.ndarray  # (n_active_cells, 8) indices into `nodes`
    nodes: np.ndarray  # lattice flat ids of active nodes
    positions: np.ndarray  # (n_nodes, 3) world coordinates
    fixed_mask: np.ndarray  # (n_nodes,) bool
    fixed_values: np.ndarray  # (n_nodes, 3)

    @property
    def n_nodes(self):
        return self.nodes.size

    @property
    def free(self):
        return ~self.fixed_mask

    def free_dofs(self):
        return np.repeat(self.free, 3)


def build_dofs(grid, classification, setup):
    """Collect nodes touched by non-empty cells; mark Dirichlet nodes fixed."""
    active = classification.active
    if active.size == 0:
        raise ValueError("grid has no active cells")
    nx, ny, nz = grid.dims
    cx = active % nx
    cy = (active // nx) % ny
    cz = active // (nx * ny)
    nxn, nyn = nx + 1, ny + 1
    corner_nodes = np.empty((active.size, 8), dtype=np.int64)
    for j in range(8):
        dx, dy, dz = (j >> 0) & 1, (j >> 1) & 1, (j >> 2) & 1
        corner_nodes[:, j] = (cx + dx) + nxn * ((cy + dy) + nyn * (cz + dz))
    nodes = np.unique(corner_nodes)
    remap = np.full((nx + 1) * (ny + 1) * (nz + 1), -1, dtype=np.int64)
    remap[nodes] = np.arange(nodes.size)
    cell_nodes = remap[corner_nodes]
    ix = nodes % nxn
    iy = (nodes // nxn) % nyn
    iz = nodes // (nxn * nyn)
    positions = grid.origin + grid.spacing * np.stack([ix, iy, iz], axis=-1)
    fixed_mask = np.zeros(nodes.size, dtype=bool)
    fixed_values = np.zeros((nodes.size, 3))
    for region in setup.dirichlet:
        inside = region.contains(positions)
        fixed_mask |= inside
        fixed_values[inside] = region.value
    return DofMap(active, cell_nodes, nodes, positions, fixed_mask, fixed_values)


class FemProblem:
    """Precomputed element tables for one grid + rules + material setup."""

    def __init__(self, grid, dofmap, rules, setup, material, stiffness_scale=None):
        if not np.array_equal(dofmap.cells, rules.cells):
            raise ValueError("dofmap and rules cover different cells")
        self.grid = grid
        self.dofmap = dofmap
        self.rules = rules
        self.setup = setup
        self.material = material
        n_cells = dofmap.cells.size
        if stiffness_scale is None:
            stiffness_scale = np.ones(n_cells)
        self.stiffness_scale = np.asarray(stiffness_scale, dtype=np.float64)
        if self.stiffness_scale.shape != (n_cells,):
            raise ValueError("stiffness_scale must have one entry per active cell")

        h = grid.spacing
        self.cell_volume = h**3
        pts = rules.points  # (nc, nQ, 3)
        self.shape_vals = hexa.shape_values(pts)  # (nc, nQ, 8)
        self.shape_grads = hexa.shape_gradients(pts) / h  # world-units gradients

        # nodes whose every adjacent cell carries zero quadrature weight have
        # empty equations (possible with clipped rules); pin them at zero
        supported = np.zeros(dofmap.n_nodes, dtype=bool)
        has_measure = rules.weights.sum(axis=1) > 0.0
        supported[dofmap.cell_nodes[has_measure]] = True
        if not supported.all():
            fixed = dofmap.fixed_mask | ~supported
            values = dofmap.fixed_values.copy()
            values[~supported & ~dofmap.fixed_mask] = 0.0
            dofmap = DofMap(
                dofmap.cells, dofmap.cell_nodes, dofmap.nodes,
                dofmap.positions, fixed, values,
            )
            self.dofmap = dofmap
        nx, ny, _ = grid.dims
        cells = dofmap.cells
        ijk = np.stack([cells % nx, (cells // nx) % ny, cells // (nx * ny)], axis=-1)
        self.cell_origin = grid.origin + h * ijk  # (nc, 3)
        self.point_positions = self.cell_origin[:, None, :] + h * pts
        self.dmu = self.cell_volume * rules.weights  # (nc, nQ) integration measure
        self.load_forces, self.load_volumes = apply_loads(setup, self, return_volumes=True)
        self.body_forces = self._body_force_vector()
        self._mass = None
        self._b_op = None

    def _body_force_vector(self):
        rho_g = self.material.density * self.setup.gravity
        contrib = self.dmu[..., None, None] * self.shape_vals[..., None] * rho_g
        out = np.zeros((self.dofmap.n_nodes, 3))
        np.add.at(out, self.dofmap.cell_nodes, contrib.sum(axis=1))
        return out

    @property
    def mass_matrix(self):
        """Consistent mass (scalar form), built on first use."""
        if self._mass is None:
            nc, nq, _ = self.shape_vals.shape
            blocks = np.einsum(
                "cq,cqi,cqj->cij", self.dmu * self.material.density, self.shape_vals, self.shape_vals
            )
            rows = np.repeat(self.dofmap.cell_nodes, 8, axis=1).ravel()
            cols = np.tile(self.dofmap.cell_nodes, (1, 8)).ravel()
            n = self.dofmap.n_nodes
            self._mass = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        return self._mass

    def external_force(self):
        return self.body_forces + self.load_forces

    def deformation_gradients(self, u):
        u_cell = u[self.dofmap.cell_nodes]  # (nc, 8, 3)
        grad_u = np.einsum("cia,cqib->cqab", u_cell, self.shape_grads)
        return grad_u + np.eye(3)

    def point_displacements(self, u):
        return np.einsum("cqi,cia->cqa", self.shape_vals, u[self.dofmap.cell_nodes])

    def assemble_energy(self, u, u_prev=None):
        f = self.deformation_gradients(u)
        psi = snh_energy(f, self.material, scale=self.stiffness_scale[:, None])
        e = float(np.sum(self.dmu * psi))
        e -= float(np.sum(self.external_force() * u))
        if self.setup.dt is not None:
            du = u if u_prev is None else u - u_prev
            up = self.point_displacements(du)
            rho_dt2 = self.material.density / self.setup.dt**2
            e += 0.5 * rho_dt2 * float(np.sum(self.dmu * np.sum(up**2, axis=-1)))
        return e

    def assemble_gradient(self, u, u_prev=None):
        """Residual of the incremental potential, one 3-vector per node."""
        f = self.deformation_gradients(u)
        pk1 = snh_pk1(f, self.material, scale=self.stiffness_scale[:, None])
        contrib = np.einsum("cq,cqab,cqib->cia", self.dmu, pk1, self.shape_grads)
        out = np.zeros((self.dofmap.n_nodes, 3))
        np.add.at(out, self.dofmap.cell_nodes, contrib)
        out -= self.external_force()
        if self.setup.dt is not None:
            du = u if u_prev is None else u - u_prev
            rho_dt2 = self.material.density / self.setup.dt**2
            up = self.point_displacements(du)
            inertial = np.einsum("cq,cqa,cqi->cia", rho_dt2 * self.dmu, up, self.shape_vals)
            np.add.at(out, self.dofmap.cell_nodes, inertial)
        return out

    @property
    def grad_operator(self):
        """Map cell displacements (24,) to vec(grad u) (9,) per point."""
        if self._b_op is None:
            nc, nq, _, _ = self.shape_grads.shape
            b = np.zeros((nc, nq, 3, 3, 8, 3))
            # (grad u)_{ab} = sum_i u_{i a} dN_i/dx_b
            for a in range(3):
                b[:, :, a, :, :, a] = np.swapaxes(self.shape_grads, 2, 3)
            self._b_op = b.reshape(nc, nq, 9, 24)
        return self._b_op

    def assemble_hessian(self, u, project=True, chunk=2048):
        """Sparse symmetric Hessian over all displacement unknowns (3n x 3n)."""
        n = self.dofmap.n_nodes
        nc, nq, _ = self.shape_vals.shape
        rows, cols, vals = [], [], []
        rho_dt2 = 0.0 if self.setup.dt is None else self.material.density / self.setup.dt**2
        b_op = self.grad_operator
        for lo in range(0, nc, chunk):
            hi = min(lo + chunk, nc)
            sl = slice(lo, hi)
            f = np.einsum(
                "cia,cqib->cqab", u[self.dofmap.cell_nodes[sl]], self.shape_grads[sl]
            ) + np.eye(3)
            c4 = snh_hessian_F(f, self.material, scale=self.stiffness_scale[sl, None], project=project)
            c9 = c4.reshape(hi - lo, nq, 9, 9)
            cb = c9 @ b_op[sl]  # (c, q, 9, 24), batched BLAS
            k = np.einsum(
                "cq,cqrj->cqrj", self.dmu[sl], cb
            )
            k = np.swapaxes(b_op[sl], -1, -2) @ k  # (c, q, 24, 24)
            k = k.sum(axis=1)
            if rho_dt2:
                m = np.einsum("cq,cqi,cqj->cij", rho_dt2 * self.dmu[sl], self.shape_vals[sl], self.shape_vals[sl])
                k24 = k.reshape(hi - lo, 8, 3, 8, 3)
                k24 += m[:, :, None, :, None] * np.eye(3)[None, None, :, None, :]
            conn = self.dofmap.cell_nodes[sl]
            dof = (3 * conn[:, :, None] + np.arange(3)).reshape(hi - lo, 24)
            rows.append(np.repeat(dof, 24, axis=1).ravel())
            cols.append(np.tile(dof, (1, 24)).ravel())
            vals.append(k.reshape(hi - lo, 24, 24).ravel())
        h = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(3 * n, 3 * n),
        ).tocsr()
        return h


def apply_loads(setup, problem, return_volumes=False):
    """Distribute each region's total force over the material inside it.

    Per-point forces scale with the quadrature weight, i.e. per unit
    material volume; a region containing no material applies nothing.
    """
    out = np.zeros((problem.dofmap.n_nodes, 3))
    volumes = []
    for region in setup.loads:
        inside = region.contains(problem.point_positions)  # (nc, nQ)
        vol = float(np.sum(problem.dmu * inside))
        volumes.append(vol)
        if vol <= 0.0:
            continue
        frac = problem.dmu * inside / vol  # (nc, nQ)
        contrib = np.einsum("cq,cqi->ci", frac, problem.shape_vals)
        np.add.at(out, problem.dofmap.cell_nodes, contrib[..., None] * region.force)
    if return_volumes:
        return out, volumes
    return out


@dataclass
class SolveResult:
    u: np.ndarray
    converged: bool
    iterations: int
    trace: list  # rows (iteration, residual_norm, energy, step_scale)
    message: str = ""


def newton_solve(
    problem,
    tol=1e-6,
    max_iters=50,
    u0=None,
    u_prev=None,
    linear_solver="jacobi_pcg",
    linear_tol=1e-8,
    project=True,
):
    """Full Newton with backtracking Armijo line search on the potential."""
    dofmap = problem.dofmap
    if problem.setup.dt is None and not np.any(dofmap.fixed_mask):
        raise ValueError("quasistatic solve requires at least one Dirichlet region")
    u = np.zeros((dofmap.n_nodes, 3)) if u0 is None else u0.copy()
    u[dofmap.fixed_mask] = dofmap.fixed_values[dofmap.fixed_mask]
    free = dofmap.free_dofs()
    b_norm = np.linalg.norm(problem.external_force().reshape(-1)[free])
    trace = []
    converged = False
    message = ""
    energy = problem.assemble_energy(u, u_prev)
    it = 0
    for it in range(max_iters):
        r = problem.assemble_gradient(u, u_prev).reshape(-1)[free]
        r_norm = np.linalg.norm(r)
        if r_norm <= tol * (1.0 + b_norm):
            trace.append((it, r_norm, energy, 0.0))
            converged = True
            break
        h = problem.assemble_hessian(u, project=project)
        h_ff = h[free][:, free]
        step, info = solve_spd(h_ff, -r, method=linear_solver, tol=linear_tol)
        if not info["converged"]:
            message = "linear solver stalled"
        slope = r @ step
        if slope >= 0.0:  # not a descent direction; fall back to steepest descent
            step = -r
            slope = r @ step
        alpha = 1.0
        accepted = False
        for k in range(30):
            u_try = u.copy()
            u_try.reshape(-1)[free] += alpha * step
            e_try = problem.assemble_energy(u_try, u_prev)
            noise = 1e-14 * (abs(energy) + abs(e_try) + 1.0)
            if e_try <= energy + 1e-4 * alpha * slope + noise:
                u, energy = u_try, e_try
                accepted = True
                break
            if k == 0:
                # energy differences can drown in rounding near convergence;
                # accept the full step if it still decreases the residual
                r_try = problem.assemble_gradient(u_try, u_prev).reshape(-1)[free]
                if np.linalg.norm(r_try) <= (1.0 - 1e-4 * alpha) * r_norm:
                    u, energy = u_try, e_try
                    accepted = True
                    break
            alpha *= 0.5
        trace.append((it, r_norm, energy, alpha if accepted else 0.0))
        if not accepted:
            message = "line search failed"
            break
    else:
        it = max_iters
    if not converged and not message:
        message = "max iterations reached"
    return SolveResult(u, converged, it, trace, message)
