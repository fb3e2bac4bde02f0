"""Four-field mixed FEM: displacement, symmetric strain, rotation, stress.

The extra tensor fields live at the quadrature points of each active cell
(collocated Lagrange nodes), which makes every tensor-space block of the
Newton system block-diagonal per point.  Each iteration eliminates the
strain and rotation blocks, then the stress block, leaving a
displacement-only Schur system solved by Jacobi-PCG (or a direct
factorization).  A merit function with an exact constraint penalty guards
the line search, and rotations are re-projected to SO(3) after every
additive update.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .material import SYM_BASIS, mat6, snh_energy, snh_gradient_S, snh_hessian_S, sym6
from .solvers import solve_spd

_EPS3 = np.zeros((3, 3, 3))
for _a, _b, _c in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
    _EPS3[_a, _b, _c] = 1.0
    _EPS3[_a, _c, _b] = -1.0


def cross_matrix(omega):
    """Skew matrix [w]x with [w]x v = w x v, batched over leading dims."""
    omega = np.asarray(omega, dtype=np.float64)
    return -np.einsum("ijk,...k->...ij", _EPS3, omega)


def axial(a):
    """Axial vector of the skew part of (..., 3, 3)."""
    a = np.asarray(a, dtype=np.float64)
    return -0.5 * np.einsum("ijk,...ij->...k", _EPS3, a)


def polar_rotation(m):
    """Closest rotation to (..., 3, 3) via SVD, det +1 enforced."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    flip = np.linalg.det(r) < 0
    if np.any(flip):
        u = u.copy()
        u[flip, :, -1] *= -1.0
        r = u @ vt
    return r


def update_rotations(r, omega):
    """Additive update R + R [omega]x followed by polar re-projection."""
    trial = r + r @ cross_matrix(omega)
    degenerate = np.linalg.norm(trial, axis=(-2, -1)) < 1e-12
    out = polar_rotation(np.where(degenerate[..., None, None], r, trial))
    return out, bool(np.any(degenerate))


@dataclass
class PenaltyConfig:
    """Constraint penalization modulus and rotation regularization rule.

    hessian_projection "scale" uses the cheap volume-term scaling fix;
    "exact" eigen-projects each 6x6 strain Hessian (idempotent on PSD
    states, so the assembled operator matches the true Jacobian there).
    """

    epsilon: float | None = None  # None: typical stress rho * g_hat * L_hat
    theta_mode: str = "stress_residual"  # or "constant"
    theta_const: float = 0.0
    typical_length: float | None = None
    typical_accel: float = 10.0
    hessian_projection: str = "scale"

    def resolve_epsilon(self, grid, material, setup):
        if self.epsilon is not None:
            return float(self.epsilon)
        l_hat = self.typical_length
        if l_hat is None:
            l_hat = float(np.max(np.asarray(grid.dims) * grid.spacing))
        g_hat = float(np.linalg.norm(setup.gravity)) or self.typical_accel
        return material.density * g_hat * l_hat


@dataclass
class MixedState:
    """Nodal displacements plus per-quadrature-node S (6-vec), R, sigma."""

    u: np.ndarray  # (n_nodes, 3)
    strain: np.ndarray  # (nc, nQ, 6)
    rotation: np.ndarray  # (nc, nQ, 3, 3)
    stress: np.ndarray  # (nc, nQ, 3, 3)

    def copy(self):
        return MixedState(self.u.copy(), self.strain.copy(), self.rotation.copy(), self.stress.copy())


def rest_state(problem):
    nc, nq, _ = problem.shape_vals.shape
    u = np.zeros((problem.dofmap.n_nodes, 3))
    strain = np.tile(sym6(np.eye(3)), (nc, nq, 1))
    rotation = np.tile(np.eye(3), (nc, nq, 1, 1))
    stress = np.zeros((nc, nq, 3, 3))
    return MixedState(u, strain, rotation, stress)


def constraint_residual(state, problem):
    """C = F(u) - R S at every quadrature node -> (nc, nQ, 3, 3)."""
    f = problem.deformation_gradients(state.u)
    return f - state.rotation @ mat6(state.strain)


def _theta(state, pen, eps):
    if pen.theta_mode == "constant":
        theta = np.full(state.stress.shape[:2], float(pen.theta_const))
    elif pen.theta_mode == "stress_residual":
        rts = np.swapaxes(state.rotation, -1, -2) @ state.stress
        theta = np.linalg.norm(rts - np.swapaxes(rts, -1, -2), axis=(-2, -1))
    else:
        raise ValueError(f"unknown theta mode {pen.theta_mode!r}")
    return np.maximum(theta, 1e-8 * eps)


@dataclass
class MixedBlocks:
    """Per-node condensation blocks and the displacement Schur system."""

    eps: float
    dmu: np.ndarray  # (nc, nQ)
    h_inv: np.ndarray  # (nc, nQ, 6, 6) inverse of unweighted H
    e_inv: np.ndarray  # (nc, nQ, 3, 3)
    lam_inv: np.ndarray  # (nc, nQ, 9, 9)
    k_tilde: np.ndarray  # (nc, nQ, 9, 6)
    l_tilde: np.ndarray  # (nc, nQ, 9, 3)
    b_op: np.ndarray  # (nc, nQ, 9, 24) nodal-displacement -> grad map
    g_u: np.ndarray  # (n_nodes * 3,) negative u-residual
    g_s: np.ndarray  # (nc, nQ, 6) negative strain residual (unweighted)
    g_r: np.ndarray  # (nc, nQ, 3)
    g_sigma: np.ndarray  # (nc, nQ, 9)
    g_hat: np.ndarray  # (nc, nQ, 9)
    schur: sp.csr_matrix
    rhs: np.ndarray
    residuals: dict


def assemble_mixed_system(problem, state, pen, u_prev=None, include_theta=True):
    """Linearize the penalized stationarity system and condense it."""
    eps = pen.resolve_epsilon(problem.grid, problem.material, problem.setup)
    dmu = problem.dmu
    scale = problem.stiffness_scale[:, None]
    f_grad = problem.deformation_gradients(state.u)
    s_mat = mat6(state.strain)
    r = state.rotation
    c_res = f_grad - r @ s_mat
    t_full = state.stress + eps * c_res

    # unweighted per-node blocks
    h_tilde = snh_hessian_S(
        state.strain, problem.material, scale=scale, project=True,
        project_mode=pen.hessian_projection,
    ) + eps * np.eye(6)
    theta = _theta(state, pen, eps) if include_theta else np.full(dmu.shape, 1e-12 * eps)
    ss_t = s_mat @ np.swapaxes(s_mat, -1, -2)
    tr_sst = np.einsum("...ii->...", ss_t)
    e_tilde = eps * (tr_sst[..., None, None] * np.eye(3) - ss_t) + theta[..., None, None] * np.eye(3)
    k_tilde = -np.einsum("cqik,mkj->cqijm", r, SYM_BASIS).reshape(dmu.shape + (9, 6))
    l_tilde = np.einsum("cqij,jmk,cqml->cqilk", r, _EPS3, s_mat).reshape(dmu.shape + (9, 3))
    h_inv = np.linalg.inv(h_tilde)
    e_inv = np.linalg.inv(e_tilde)
    lam = k_tilde @ h_inv @ np.swapaxes(k_tilde, -1, -2)
    lam += l_tilde @ e_inv @ np.swapaxes(l_tilde, -1, -2)
    lam_inv = np.linalg.inv(lam)

    # negative residuals (right-hand sides of the Newton rows)
    rt_t = np.swapaxes(r, -1, -2) @ t_full
    g_s = -(snh_gradient_S(state.strain, problem.material, scale=scale) - sym6(rt_t))
    g_r = 2.0 * axial(rt_t @ np.swapaxes(s_mat, -1, -2))
    g_sigma = -c_res.reshape(dmu.shape + (9,))

    sigma_forces = np.einsum("cq,cqab,cqib->cia", dmu, state.stress, problem.shape_grads)
    f_u = np.zeros((problem.dofmap.n_nodes, 3))
    np.add.at(f_u, problem.dofmap.cell_nodes, sigma_forces)
    f_u -= problem.external_force()
    if problem.setup.dt is not None:
        du = state.u if u_prev is None else state.u - u_prev
        rho_dt2 = problem.material.density / problem.setup.dt**2
        up = problem.point_displacements(du)
        inertial = np.einsum("cq,cqa,cqi->cia", rho_dt2 * dmu, up, problem.shape_vals)
        np.add.at(f_u, problem.dofmap.cell_nodes, inertial)
    g_u = -f_u.reshape(-1)

    g_hat = g_sigma - np.einsum("cqij,cqjk,cqk->cqi", k_tilde, h_inv, g_s)
    g_hat -= np.einsum("cqij,cqjk,cqk->cqi", l_tilde, e_inv, g_r)

    b_op = problem.grad_operator
    lam_b = lam_inv @ b_op  # (c, q, 9, 24), batched BLAS
    cell_blocks = (np.swapaxes(b_op, -1, -2) @ (dmu[..., None, None] * lam_b)).sum(axis=1)
    conn = problem.dofmap.cell_nodes
    dof = (3 * conn[:, :, None] + np.arange(3)).reshape(conn.shape[0], 24)
    rows = np.repeat(dof, 24, axis=1).ravel()
    cols = np.tile(dof, (1, 24)).ravel()
    n = 3 * problem.dofmap.n_nodes
    schur = sp.coo_matrix((cell_blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    if problem.setup.dt is not None:
        m = problem.mass_matrix / problem.setup.dt**2
        schur = schur + sp.kron(m, sp.eye(3), format="csr")

    lam_g = np.einsum("cqrs,cqs->cqr", lam_inv, g_hat)
    rhs_extra = dmu[..., None] * np.einsum("cqri,cqr->cqi", b_op, lam_g)
    rhs = g_u.copy()
    add = np.zeros((problem.dofmap.n_nodes, 3))
    np.add.at(add, conn, rhs_extra.sum(axis=1).reshape(conn.shape[0], 8, 3))
    rhs += add.reshape(-1)

    c_norm = np.linalg.norm(c_res, axis=(-2, -1))
    residuals = {
        "u": float(np.linalg.norm(g_u.reshape(-1, 3)[problem.dofmap.free])),
        "constraint_max": float(c_norm.max() if c_norm.size else 0.0),
        "strain": float(np.abs(g_s).max() if g_s.size else 0.0),
        "rotation": float(np.abs(g_r).max() if g_r.size else 0.0),
    }
    return MixedBlocks(
        eps, dmu, h_inv, e_inv, lam_inv, k_tilde, l_tilde, b_op,
        g_u, g_s, g_r, g_sigma, g_hat, schur, rhs, residuals,
    )


def condense_and_solve(blocks, problem, linear_solver="jacobi_pcg", linear_tol=1e-8):
    """Solve the Schur system and back-substitute stress/strain/rotation steps."""
    free = problem.dofmap.free_dofs()
    n = blocks.rhs.size
    a_ff = blocks.schur[free][:, free]
    du_free, info = solve_spd(a_ff, blocks.rhs[free], method=linear_solver, tol=linear_tol)
    du = np.zeros(n)
    du[free] = du_free
    du = du.reshape(-1, 3)

    grad_du = np.einsum(
        "cqrj,cj->cqr", blocks.b_op, du[problem.dofmap.cell_nodes].reshape(-1, 24)
    )  # vec(grad delta u) per node
    # the integration measure cancels between the block rows and columns, so
    # back-substitution runs on the unweighted per-node systems (valid even
    # for zero-weight points, whose fields then track the local constraint)
    d_sigma = np.einsum("cqij,cqj->cqi", blocks.lam_inv, grad_du - blocks.g_hat)
    ks = np.einsum("cqji,cqj->cqi", blocks.k_tilde, d_sigma)
    d_strain = np.einsum("cqij,cqj->cqi", blocks.h_inv, blocks.g_s - ks)
    ls = np.einsum("cqji,cqj->cqi", blocks.l_tilde, d_sigma)
    d_omega = np.einsum("cqij,cqj->cqi", blocks.e_inv, blocks.g_r - ls)
    return du, d_strain, d_omega, d_sigma.reshape(d_sigma.shape[:2] + (3, 3)), info


def merit_value(state, problem, e_weight, u_prev=None):
    """Exact-penalty merit: potential in (u, S) plus E_Y-weighted ||C||."""
    dmu = problem.dmu
    psi = snh_energy(mat6(state.strain), problem.material, scale=problem.stiffness_scale[:, None])
    val = float(np.sum(dmu * psi))
    val -= float(np.sum(problem.external_force() * state.u))
    if problem.setup.dt is not None:
        du = state.u if u_prev is None else state.u - u_prev
        up = problem.point_displacements(du)
        rho_dt2 = problem.material.density / problem.setup.dt**2
        val += 0.5 * rho_dt2 * float(np.sum(dmu * np.sum(up**2, axis=-1)))
    c_norm = np.linalg.norm(constraint_residual(state, problem), axis=(-2, -1))
    val += float(np.sum(dmu * e_weight[:, None] * c_norm))
    return val


def merit_directional(state, problem, e_weight, du, d_strain, d_omega, u_prev=None):
    dmu = problem.dmu
    grad = snh_gradient_S(state.strain, problem.material, scale=problem.stiffness_scale[:, None])
    d = float(np.sum(dmu[..., None] * grad * d_strain))
    d -= float(np.sum(problem.external_force() * du))
    if problem.setup.dt is not None:
        duu = state.u if u_prev is None else state.u - u_prev
        rho_dt2 = problem.material.density / problem.setup.dt**2
        up = problem.point_displacements(duu)
        dup = problem.point_displacements(du)
        d += rho_dt2 * float(np.sum(dmu * np.sum(up * dup, axis=-1)))
    c = constraint_residual(state, problem)
    dc = problem.deformation_gradients(state.u + du) - problem.deformation_gradients(state.u)
    dc -= state.rotation @ mat6(d_strain)
    dc -= state.rotation @ cross_matrix(d_omega) @ mat6(state.strain)
    c_norm = np.linalg.norm(c, axis=(-2, -1))
    unit = c / np.maximum(c_norm, 1e-30)[..., None, None]
    d += float(np.sum(dmu * e_weight[:, None] * np.einsum("cqab,cqab->cq", unit, dc)))
    return d


def merit_weight(problem):
    """Constraint weight for the merit function: the base Young modulus.

    Weighting by the local (stiffness-scaled) modulus freezes the line
    search in strongly stiffened regions: the feasibility remainder of a
    Newton step is O(alpha^2), and a 1e6-scaled penalty forces alpha ~ 0.
    """
    return problem.material.young_modulus * np.ones_like(problem.stiffness_scale)


def merit_linesearch(state, problem, pen, du, d_strain, d_omega, d_sigma, u_prev=None, max_halvings=30):
    """Backtracking Armijo on the merit function; returns (new state, alpha)."""
    e_weight = merit_weight(problem)
    phi0 = merit_value(state, problem, e_weight, u_prev)
    slope = merit_directional(state, problem, e_weight, du, d_strain, d_omega, u_prev)
    alpha = 1.0
    for _ in range(max_halvings):
        trial = MixedState(
            state.u + alpha * du,
            state.strain + alpha * d_strain,
            update_rotations(state.rotation, alpha * d_omega)[0],
            state.stress + alpha * d_sigma,
        )
        phi = merit_value(trial, problem, e_weight, u_prev)
        noise = 1e-14 * (abs(phi0) + abs(phi) + 1.0)
        if phi <= phi0 + 1e-4 * alpha * min(slope, 0.0) + noise:
            return trial, alpha
        alpha *= 0.5
    return state, 0.0


@dataclass
class MixedSolveResult:
    state: MixedState
    converged: bool
    iterations: int
    trace: list  # rows (iteration, merit, constraint_max, u_residual, alpha)
    message: str = ""


def mixed_newton_solve(
    problem,
    pen=None,
    tol=1e-6,
    max_iters=100,
    state0=None,
    u_prev=None,
    linear_solver="jacobi_pcg",
    linear_tol=1e-8,
    constraint_tol=None,
):
    """Full Newton loop: assemble, condense, line search, rotation update."""
    pen = pen or PenaltyConfig()
    if constraint_tol is None:
        constraint_tol = max(tol, 1e-8)
    dofmap = problem.dofmap
    if problem.setup.dt is None and not np.any(dofmap.fixed_mask):
        raise ValueError("quasistatic solve requires at least one Dirichlet region")
    state = state0.copy() if state0 is not None else rest_state(problem)
    state.u[dofmap.fixed_mask] = dofmap.fixed_values[dofmap.fixed_mask]
    b_norm = np.linalg.norm(problem.external_force()[dofmap.free])
    e_weight = merit_weight(problem)
    trace = []
    converged = False
    message = ""
    it = 0
    for it in range(max_iters):
        blocks = assemble_mixed_system(problem, state, pen, u_prev)
        res = blocks.residuals
        merit = merit_value(state, problem, e_weight, u_prev)
        if res["u"] <= tol * (1.0 + b_norm) and res["constraint_max"] <= constraint_tol:
            trace.append((it, merit, res["constraint_max"], res["u"], 0.0))
            converged = True
            break
        du, d_strain, d_omega, d_sigma, info = condense_and_solve(
            blocks, problem, linear_solver, linear_tol
        )
        if not info["converged"]:
            message = "linear solver stalled"
        state, alpha = merit_linesearch(state, problem, pen, du, d_strain, d_omega, d_sigma, u_prev)
        trace.append((it, merit, res["constraint_max"], res["u"], alpha))
        if alpha == 0.0:
            message = "line search stalled"
            break
    else:
        it = max_iters
    if not converged and not message:
        message = "max iterations reached"
    return MixedSolveResult(state, converged, it, trace, message)
