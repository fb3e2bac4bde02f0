"""Gradients of post-solve losses with respect to shape and material.

At a converged equilibrium the implicit function theorem turns the gradient
into one linear solve with the system matrix plus a contraction with the
residual's parameter derivatives.  The residual is an explicit sum over
quadrature points, so its derivatives with respect to point weights and
positions are closed form; the chain to nodal SDF values runs through the
quadrature network's input Jacobian.  Rules from the full or clip sources
do not depend on the SDF values at all, so their shape gradient is exactly
zero.
"""

from dataclasses import dataclass, field

import numpy as np

from . import hexa, quadnet
from .grid import cell_corner_values
from .material import mat6, snh_gradient_S, snh_hessian_F, snh_pk1, sym6
from .mixedfem import assemble_mixed_system, axial, cross_matrix
from .solvers import solve_spd


@dataclass
class ParamSet:
    """Optimizable nodal SDF values and per-cell stiffness multipliers."""

    sdf: np.ndarray
    stiffness: np.ndarray
    frozen_sdf: np.ndarray | None = None
    frozen_stiffness: np.ndarray | None = None


@dataclass
class AdjointResult:
    d_loss_d_sdf: np.ndarray  # nodal field, grid node shape
    d_loss_d_stiffness: np.ndarray  # one entry per grid cell
    diagnostics: dict = field(default_factory=dict)


@dataclass
class LossPartials:
    """Derivatives of a scalar loss w.r.t. state and rule parameters."""

    value: float
    d_u: np.ndarray  # (n_nodes, 3)
    d_weights: np.ndarray  # (nc, nQ) direct dependence on rule weights
    d_points: np.ndarray  # (nc, nQ, 3)
    d_sigma: np.ndarray | None = None  # (nc, nQ, 3, 3) for mixed states


def zero_partials(problem):
    nc, nq, _ = problem.shape_vals.shape
    return LossPartials(
        0.0,
        np.zeros((problem.dofmap.n_nodes, 3)),
        np.zeros((nc, nq)),
        np.zeros((nc, nq, 3)),
    )


def adjoint_solve(problem, u, d_loss_d_u, project=True, linear_solver="jacobi_pcg", linear_tol=1e-8):
    """Solve H z = dL/du on the free displacement unknowns."""
    free = problem.dofmap.free_dofs()
    h = problem.assemble_hessian(u, project=project)
    rhs = np.asarray(d_loss_d_u, dtype=np.float64).reshape(-1)[free]
    z_free, info = solve_spd(h[free][:, free], rhs, method=linear_solver, tol=linear_tol)
    z = np.zeros(3 * problem.dofmap.n_nodes)
    z[free] = z_free
    return z.reshape(-1, 3), info


def _adjoint_field_values(problem, z):
    """z interpolated at quadrature points and its world/reference gradients."""
    z_cell = z[problem.dofmap.cell_nodes]  # (nc, 8, 3)
    z_at = np.einsum("cqi,cia->cqa", problem.shape_vals, z_cell)
    grad_z = np.einsum("cia,cqib->cqab", z_cell, problem.shape_grads)
    ref_grads = hexa.shape_gradients(problem.rules.points)  # (nc, nQ, 8, 3)
    dz_dy = np.einsum("cia,cqik->cqak", z_cell, ref_grads)
    return z_cell, z_at, grad_z, dz_dy


def displacement_residual_partials(problem, u, z, u_prev=None):
    """Contractions z . df/dw and z . df/dy for the displacement residual."""
    h = problem.grid.spacing
    h3 = h**3
    mat = problem.material
    scale = problem.stiffness_scale[:, None]
    f_grad = problem.deformation_gradients(u)
    pk1 = snh_pk1(f_grad, mat, scale=scale)
    u_cell = u[problem.dofmap.cell_nodes]
    _, z_at, grad_z, dz_dy = _adjoint_field_values(problem, z)
    ref_grads = hexa.shape_gradients(problem.rules.points)
    ref_hess = hexa.shape_hessians(problem.rules.points)  # (nc,nQ,8,3,3)

    d_w = h3 * np.einsum("cqab,cqab->cq", pk1, grad_z)
    d_w -= h3 * mat.density * (z_at @ problem.setup.gravity)
    du_at = None
    if problem.setup.dt is not None:
        du_field = u if u_prev is None else u - u_prev
        du_at = problem.point_displacements(du_field)
        rho_dt2 = mat.density / problem.setup.dt**2
        d_w += h3 * rho_dt2 * np.einsum("cqa,cqa->cq", du_at, z_at)

    # dF/dy_k = sum_i u_i x d(grad N_i)/dy_k, world gradient differentiated
    # in reference coordinates
    df_dy = np.einsum("cia,cqibk->cqabk", u_cell, ref_hess) / h
    c4 = snh_hessian_F(f_grad, mat, scale=scale, project=False)
    d_y = problem.dmu[..., None] * (
        np.einsum("cqabef,cqefk,cqab->cqk", c4, df_dy, grad_z, optimize=True)
        + np.einsum("cqab,cqabk->cqk", pk1, np.einsum("cia,cqibk->cqabk", z[problem.dofmap.cell_nodes], ref_hess) / h)
    )
    d_y -= problem.dmu[..., None] * mat.density * np.einsum("a,cqak->cqk", problem.setup.gravity, dz_dy)
    if problem.setup.dt is not None:
        rho_dt2 = mat.density / problem.setup.dt**2
        du_cell = (u if u_prev is None else u - u_prev)[problem.dofmap.cell_nodes]
        ddu_dy = np.einsum("cia,cqik->cqak", du_cell, ref_grads)
        d_y += problem.dmu[..., None] * rho_dt2 * (
            np.einsum("cqak,cqa->cqk", ddu_dy, z_at) + np.einsum("cqa,cqak->cqk", du_at, dz_dy)
        )

    # load regions: per-point force T h3 w chi / V, with V = sum h3 w chi
    for region, vol in zip(problem.setup.loads, problem.load_volumes):
        if vol <= 0.0:
            continue
        chi = region.contains(problem.point_positions)
        t_dot_z = z_at @ region.force
        a_total = float(np.sum(problem.dmu * chi * t_dot_z)) / vol
        d_w -= (h3 * chi / vol) * (t_dot_z - a_total)
        d_y -= (problem.dmu * chi / vol)[..., None] * np.einsum(
            "a,cqak->cqk", region.force, dz_dy
        )
    return d_w, d_y


def displacement_stiffness_partials(problem, u, z):
    """Contraction z . df/d(per-cell stiffness scale)."""
    f_grad = problem.deformation_gradients(u)
    pk1_base = snh_pk1(f_grad, problem.material)  # scale 1
    _, _, grad_z, _ = _adjoint_field_values(problem, z)
    return np.einsum("cq,cqab,cqab->c", problem.dmu, pk1_base, grad_z)


def chain_rules_to_sdf(problem, grid, d_w, d_y, net):
    """Chain per-point weight/position sensitivities to nodal SDF values.

    Only cells whose rules came from the network contribute; other sources
    are piecewise constant in the SDF and their gradient is exactly zero.
    """
    out = np.zeros(grid.node_shape)
    mask = problem.rules.neural_mask
    if net is None or not np.any(mask):
        return out
    cells = problem.dofmap.cells[mask]
    corner_phi = cell_corner_values(grid)[cells]
    d_pts, d_wts = quadnet.rule_jacobian_wrt_sdf(net, corner_phi)
    contrib = np.einsum("cq,cqj->cj", d_w[mask], d_wts)
    contrib += np.einsum("cqk,cqkj->cj", d_y[mask], d_pts)
    nx, ny, nz = grid.dims
    nxn, nyn = nx + 1, ny + 1
    cx = cells % nx
    cy = (cells // nx) % ny
    cz = cells // (nx * ny)
    flat = out.reshape(-1, order="F")
    for j in range(8):
        dx, dy_, dz = (j >> 0) & 1, (j >> 1) & 1, (j >> 2) & 1
        node = (cx + dx) + nxn * ((cy + dy_) + nyn * (cz + dz))
        np.add.at(flat, node, contrib[:, j])
    return flat.reshape(grid.node_shape, order="F")


def residual_param_jacobian_contraction(problem, grid, z, partials, net=None, u=None, u_prev=None):
    """Assemble dL/d(sdf) and dL/d(stiffness) from the adjoint vector.

    Combines the loss's direct rule-parameter derivatives with the negated
    contraction -z . df/dp, then chains to nodal SDF values through the
    network Jacobian.
    """
    d_w, d_y = displacement_residual_partials(problem, u, z, u_prev)
    d_w = partials.d_weights - d_w
    d_y = partials.d_points - d_y
    d_sdf = chain_rules_to_sdf(problem, grid, d_w, d_y, net)
    d_stiff_active = -displacement_stiffness_partials(problem, u, z)
    d_stiff = np.zeros(grid.n_cells)
    d_stiff[problem.dofmap.cells] = d_stiff_active
    return d_sdf, d_stiff


def displacement_loss_gradient(
    problem,
    grid,
    u,
    partials,
    net=None,
    params=None,
    u_prev=None,
    project=True,
    linear_solver="jacobi_pcg",
    linear_tol=1e-8,
):
    """Full gradient pipeline for a converged displacement-FEM state."""
    z, info = adjoint_solve(
        problem, u, partials.d_u, project=project,
        linear_solver=linear_solver, linear_tol=linear_tol,
    )
    d_sdf, d_stiff = residual_param_jacobian_contraction(
        problem, grid, z, partials, net=net, u=u, u_prev=u_prev
    )
    if params is not None:
        if params.frozen_sdf is not None:
            d_sdf[params.frozen_sdf] = 0.0
        if params.frozen_stiffness is not None:
            d_stiff[params.frozen_stiffness] = 0.0
    return AdjointResult(d_sdf, d_stiff, {"linear_solve": info})


def mixed_adjoint_solve(problem, state, pen, partials, u_prev=None, linear_solver="jacobi_pcg", linear_tol=1e-8):
    """Adjoint solve through the condensed mixed system.

    Loss derivatives w.r.t. the tensor fields are condensed into the
    displacement block by the forward elimination; the system matrix is the
    last Newton matrix without the rotation regularization term.
    """
    blocks = assemble_mixed_system(problem, state, pen, u_prev=u_prev, include_theta=False)
    dmu = blocks.dmu
    safe = np.where(dmu > 0.0, dmu, 1.0)[..., None]
    g_s = np.zeros(dmu.shape + (6,))
    g_r = np.zeros(dmu.shape + (3,))
    g_sigma = (partials.d_sigma if partials.d_sigma is not None else np.zeros(dmu.shape + (3, 3)))
    g_sigma = g_sigma.reshape(dmu.shape + (9,)) / safe
    g_sigma[dmu <= 0.0] = 0.0
    g_hat = g_sigma - np.einsum("cqij,cqjk,cqk->cqi", blocks.k_tilde, blocks.h_inv, g_s)
    g_hat -= np.einsum("cqij,cqjk,cqk->cqi", blocks.l_tilde, blocks.e_inv, g_r)

    rhs = np.asarray(partials.d_u, dtype=np.float64).reshape(-1).copy()
    extra = np.einsum("cq,cqri,cqrs,cqs->cqi", dmu, blocks.b_op, blocks.lam_inv, g_hat, optimize=True)
    add = np.zeros((problem.dofmap.n_nodes, 3))
    np.add.at(add, problem.dofmap.cell_nodes, extra.sum(axis=1).reshape(-1, 8, 3))
    rhs += add.reshape(-1)

    free = problem.dofmap.free_dofs()
    z_free, info = solve_spd(blocks.schur[free][:, free], rhs[free], method=linear_solver, tol=linear_tol)
    z_u = np.zeros(3 * problem.dofmap.n_nodes)
    z_u[free] = z_free
    z_u = z_u.reshape(-1, 3)

    grad_zu = np.einsum("cqrj,cj->cqr", blocks.b_op, z_u[problem.dofmap.cell_nodes].reshape(-1, 24))
    z_sigma = np.einsum("cqij,cqj->cqi", blocks.lam_inv, grad_zu - g_hat)
    z_strain = np.einsum(
        "cqij,cqj->cqi", blocks.h_inv, g_s - np.einsum("cqji,cqj->cqi", blocks.k_tilde, z_sigma)
    )
    z_omega = np.einsum(
        "cqij,cqj->cqi", blocks.e_inv, g_r - np.einsum("cqji,cqj->cqi", blocks.l_tilde, z_sigma)
    )
    return z_u, z_strain, z_omega, z_sigma.reshape(dmu.shape + (3, 3)), info


def mixed_residual_param_contraction(
    problem, grid, state, pen, z_u, z_strain, z_omega, z_sigma, partials, net=None, u_prev=None
):
    """Contract the mixed residual's parameter derivatives with the adjoint.

    Every residual row scales with the point measure, so the weight
    derivative reuses the unweighted residuals; position derivatives chain
    through d(F(u))/dy and the shape-function curvature.
    """
    h = problem.grid.spacing
    h3 = h**3
    eps = pen.resolve_epsilon(problem.grid, problem.material, problem.setup)
    scale = problem.stiffness_scale[:, None]
    mat = problem.material
    s_mat = mat6(state.strain)
    r = state.rotation
    f_grad = problem.deformation_gradients(state.u)
    c_res = f_grad - r @ s_mat
    t_full = state.stress + eps * c_res
    rt_t = np.swapaxes(r, -1, -2) @ t_full
    strain_res = snh_gradient_S(state.strain, mat, scale=scale) - sym6(rt_t)
    rot_res = -2.0 * axial(rt_t @ np.swapaxes(s_mat, -1, -2))

    u_cell = state.u[problem.dofmap.cell_nodes]
    z_cell, z_at, grad_z, dz_dy = _adjoint_field_values(problem, z_u)
    ref_grads = hexa.shape_gradients(problem.rules.points)
    ref_hess = hexa.shape_hessians(problem.rules.points)
    du_at = None
    if problem.setup.dt is not None:
        du_field = state.u if u_prev is None else state.u - u_prev
        du_at = problem.point_displacements(du_field)

    # z . dF/dw per point
    d_w = h3 * np.einsum("cqab,cqab->cq", state.stress, grad_z)
    d_w -= h3 * mat.density * (z_at @ problem.setup.gravity)
    if problem.setup.dt is not None:
        rho_dt2 = mat.density / problem.setup.dt**2
        d_w += h3 * rho_dt2 * np.einsum("cqa,cqa->cq", du_at, z_at)
    for region, vol in zip(problem.setup.loads, problem.load_volumes):
        if vol <= 0.0:
            continue
        chi = region.contains(problem.point_positions)
        t_dot_z = z_at @ region.force
        a_total = float(np.sum(problem.dmu * chi * t_dot_z)) / vol
        d_w -= (h3 * chi / vol) * (t_dot_z - a_total)
    d_w += h3 * np.einsum("cqm,cqm->cq", strain_res, z_strain)
    d_w += h3 * np.einsum("cqk,cqk->cq", rot_res, z_omega)
    d_w += h3 * np.einsum("cqab,cqab->cq", c_res, z_sigma)

    # z . dF/dy per point
    df_dy = np.einsum("cia,cqibk->cqabk", u_cell, ref_hess) / h
    dgz_dy = np.einsum("cia,cqibk->cqabk", z_cell, ref_hess) / h
    d_y = problem.dmu[..., None] * np.einsum("cqab,cqabk->cqk", state.stress, dgz_dy)
    d_y -= problem.dmu[..., None] * mat.density * np.einsum("a,cqak->cqk", problem.setup.gravity, dz_dy)
    if problem.setup.dt is not None:
        rho_dt2 = mat.density / problem.setup.dt**2
        du_cell = (state.u if u_prev is None else state.u - u_prev)[problem.dofmap.cell_nodes]
        ddu_dy = np.einsum("cia,cqik->cqak", du_cell, ref_grads)
        d_y += problem.dmu[..., None] * rho_dt2 * (
            np.einsum("cqak,cqa->cqk", ddu_dy, z_at) + np.einsum("cqa,cqak->cqk", du_at, dz_dy)
        )
    for region, vol in zip(problem.setup.loads, problem.load_volumes):
        if vol <= 0.0:
            continue
        chi = region.contains(problem.point_positions)
        d_y -= (problem.dmu * chi / vol)[..., None] * np.einsum("a,cqak->cqk", region.force, dz_dy)
    # strain row: z_S . (-dmu eps sym(R^T dF_k)) = -dmu eps (R Z) : dF_k
    rz = r @ mat6(z_strain)
    d_y -= problem.dmu[..., None] * eps * np.einsum("cqab,cqabk->cqk", rz, df_dy)
    # rotation row: z_w . (-2 dmu eps axial(R^T dF_k S)) = dmu eps (R X S) : dF_k
    # with X = -[z_w]x (the epsilon contraction folds the axial map into X)
    rxs = r @ (-cross_matrix(z_omega)) @ s_mat
    d_y += problem.dmu[..., None] * eps * np.einsum("cqab,cqabk->cqk", rxs, df_dy)
    # constraint row: dmu z_sigma : dF_k
    d_y += problem.dmu[..., None] * np.einsum("cqab,cqabk->cqk", z_sigma, df_dy)

    d_w = partials.d_weights - d_w
    d_y = partials.d_points - d_y
    d_sdf = chain_rules_to_sdf(problem, grid, d_w, d_y, net)

    base_grad = snh_gradient_S(state.strain, mat)  # scale 1
    d_stiff_active = -np.einsum("cq,cqm,cqm->c", problem.dmu, base_grad, z_strain)
    d_stiff = np.zeros(grid.n_cells)
    d_stiff[problem.dofmap.cells] = d_stiff_active
    return d_sdf, d_stiff


def mixed_loss_gradient(
    problem,
    grid,
    state,
    pen,
    partials,
    net=None,
    params=None,
    u_prev=None,
    linear_solver="jacobi_pcg",
    linear_tol=1e-8,
):
    """Full gradient pipeline for a converged mixed-FEM state."""
    z_u, z_s, z_w, z_sig, info = mixed_adjoint_solve(
        problem, state, pen, partials, u_prev=u_prev,
        linear_solver=linear_solver, linear_tol=linear_tol,
    )
    d_sdf, d_stiff = mixed_residual_param_contraction(
        problem, grid, state, pen, z_u, z_s, z_w, z_sig, partials, net=net, u_prev=u_prev
    )
    if params is not None:
        if params.frozen_sdf is not None:
            d_sdf[params.frozen_sdf] = 0.0
        if params.frozen_stiffness is not None:
            d_stiff[params.frozen_stiffness] = 0.0
    return AdjointResult(d_sdf, d_stiff, {"linear_solve": info})
