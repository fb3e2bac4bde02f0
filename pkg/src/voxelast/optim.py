"""Physics-aware shape/topology/material optimization.

An Adam loop over raw nodal SDF values (and optionally per-cell log
stiffness multipliers).  Raw parameters are preconditioned by mirror
averaging and Gaussian smoothing before they define the simulated domain;
gradients flow back through the exact transpose.  The loss combines a
banded SDF reconstruction term, a p-norm physics loss over displacement
and stress at the quadrature points, and a smoothed-Heaviside surface-area
regularizer.  Physics activates only after a configurable fraction of the
iterations, with the timestep ramped in.
"""

from dataclasses import dataclass, field

import numpy as np

from . import hexa
from .adjoint import mixed_loss_gradient, zero_partials
from .fem import FemProblem, SimSetup, build_dofs
from .grid import cell_corner_values, classify_cells, gaussian_precondition
from .material import snh_hessian_F, snh_pk1
from .mixedfem import PenaltyConfig, mixed_newton_solve, rest_state
from .rules import build_cell_rules


@dataclass
class PhysLossConfig:
    """Weights and power of the physics loss over material points."""

    ell_u: float = 1.0
    ell_sigma: float = 0.0
    power: int = 8

    def __post_init__(self):
        if self.power < 2 or self.power % 2:
            raise ValueError("power must be an even integer >= 2")
        if self.ell_u < 0 or self.ell_sigma < 0 or (self.ell_u == 0 and self.ell_sigma == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")


@dataclass
class Schedule:
    """Outer-loop iteration budget, physics activation, and dt ramp."""

    total_iters: int = 200
    recon_only_fraction: float = 0.30
    dt_ramp_fraction: float = 0.50  # dt reaches its final value here
    dt_initial_scale: float = 0.1
    dt_final: float = 1.0
    learning_rate: float = 0.02
    lr_final_scale: float = 0.01  # cosine decay floor, as a fraction of learning_rate

    def __post_init__(self):
        for frac in (self.recon_only_fraction, self.dt_ramp_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ValueError("schedule fractions must lie in [0, 1]")

    def physics_active(self, it):
        return it >= self.recon_only_fraction * self.total_iters

    def lr_at(self, it):
        lo = self.lr_final_scale * self.learning_rate
        frac = it / max(1, self.total_iters)
        return lo + 0.5 * (self.learning_rate - lo) * (1.0 + np.cos(np.pi * frac))

    def dt_at(self, it):
        start = self.recon_only_fraction * self.total_iters
        end = max(self.dt_ramp_fraction * self.total_iters, start + 1e-9)
        t = np.clip((it - start) / (end - start), 0.0, 1.0)
        return self.dt_final * (self.dt_initial_scale + (1.0 - self.dt_initial_scale) * t)


def phys_loss_mixed(problem, state, cfg):
    """p-norm of displacement and stress over material quadrature points.

    The quadrature weight cancels against the inverse point measure, so
    each material point contributes unweighted; removing material therefore
    does not trivially reduce the loss.  Returns the scalar plus analytic
    partials for the adjoint.
    """
    p = cfg.power
    mask = (problem.dmu > 0.0).astype(np.float64)
    u_at = problem.point_displacements(state.u)
    u_norm = np.linalg.norm(u_at, axis=-1)
    sig_norm = np.linalg.norm(state.stress, axis=(-2, -1))
    total = float(np.sum(mask * (cfg.ell_u * u_norm**p + cfg.ell_sigma * sig_norm**p)))
    partials = zero_partials(problem)
    partials.d_sigma = np.zeros_like(state.stress)
    if total <= 0.0:
        return partials
    value = total ** (1.0 / p)
    partials.value = value
    d_total = value / (p * total)  # d(T^{1/p})/dT

    du_point = mask[..., None] * cfg.ell_u * p * u_norm[..., None] ** (p - 2) * u_at
    contrib = d_total * np.einsum("cqi,cqa->cia", problem.shape_vals, du_point)
    np.add.at(partials.d_u, problem.dofmap.cell_nodes, contrib)
    if cfg.ell_sigma > 0.0:
        partials.d_sigma = (
            d_total * mask[..., None, None] * cfg.ell_sigma * p
            * sig_norm[..., None, None] ** (p - 2) * state.stress
        )
    ref_grads = hexa.shape_gradients(problem.rules.points)
    du_dy = np.einsum("cia,cqik->cqak", state.u[problem.dofmap.cell_nodes], ref_grads)
    partials.d_points = d_total * np.einsum("cqa,cqak->cqk", du_point, du_dy)
    return partials


def phys_loss_displacement(problem, u, cfg):
    """Displacement-FEM variant; stress is the constitutive PK1 at each point."""
    p = cfg.power
    mask = (problem.dmu > 0.0).astype(np.float64)
    u_at = problem.point_displacements(u)
    u_norm = np.linalg.norm(u_at, axis=-1)
    f_grad = problem.deformation_gradients(u)
    scale = problem.stiffness_scale[:, None]
    pk1 = snh_pk1(f_grad, problem.material, scale=scale)
    sig_norm = np.linalg.norm(pk1, axis=(-2, -1))
    total = float(np.sum(mask * (cfg.ell_u * u_norm**p + cfg.ell_sigma * sig_norm**p)))
    partials = zero_partials(problem)
    if total <= 0.0:
        return partials
    value = total ** (1.0 / p)
    partials.value = value
    d_total = value / (p * total)

    du_point = mask[..., None] * cfg.ell_u * p * u_norm[..., None] ** (p - 2) * u_at
    contrib = d_total * np.einsum("cqi,cqa->cia", problem.shape_vals, du_point)
    np.add.at(partials.d_u, problem.dofmap.cell_nodes, contrib)
    ref_grads = hexa.shape_gradients(problem.rules.points)
    du_dy = np.einsum("cia,cqik->cqak", u[problem.dofmap.cell_nodes], ref_grads)
    partials.d_points = d_total * np.einsum("cqa,cqak->cqk", du_point, du_dy)
    if cfg.ell_sigma > 0.0:
        dpk = mask[..., None, None] * cfg.ell_sigma * p * sig_norm[..., None, None] ** (p - 2) * pk1
        c4 = snh_hessian_F(f_grad, problem.material, scale=scale, project=False)
        df_contr = np.einsum("cqab,cqabef->cqef", dpk, c4)  # dT/dF per point
        add = d_total * np.einsum("cqef,cqif->cie", df_contr, problem.shape_grads)
        np.add.at(partials.d_u, problem.dofmap.cell_nodes, add)
        ref_hess = hexa.shape_hessians(problem.rules.points)
        df_dy = np.einsum(
            "cia,cqibk->cqabk", u[problem.dofmap.cell_nodes], ref_hess
        ) / problem.grid.spacing
        partials.d_points += d_total * np.einsum("cqef,cqefk->cqk", df_contr, df_dy)
    return partials


def recon_loss(phi, target_phi, band):
    """Squared mismatch of band-clamped SDF values, with analytic gradient."""
    a = np.clip(phi, -band, band)
    b = np.clip(target_phi, -band, band)
    diff = a - b
    grad = 2.0 * diff * (np.abs(phi) < band)
    return float(np.sum(diff**2)), grad


def surface_regularizer(grid, width_cells=1.5):
    """Smoothed-Heaviside perimeter proxy: integral of |grad H(phi)|.

    Evaluated at cell centers from the corner values; penalizes interface
    area, floaters and bumpiness.  Returns (value, gradient wrt nodal phi).
    """
    h = grid.spacing
    delta = width_cells * h
    corners = cell_corner_values(grid)  # (n_cells, 8)
    phi_c = corners.mean(axis=1)
    g = corners @ hexa.CENTER_GRAD / h  # world-units center gradient
    g_norm = np.linalg.norm(g, axis=1)
    inside = np.abs(phi_c) < delta
    hprime = np.where(inside, (1.0 + np.cos(np.pi * phi_c / delta)) / (2.0 * delta), 0.0)
    value = float(h**3 * np.sum(hprime * g_norm))

    hdd = np.where(inside, -np.pi * np.sin(np.pi * phi_c / delta) / (2.0 * delta**2), 0.0)
    safe = np.maximum(g_norm, 1e-30)
    d_corners = h**3 * (
        hdd[:, None] * g_norm[:, None] / 8.0
        + hprime[:, None] * (g / safe[:, None]) @ hexa.CENTER_GRAD.T / h
    )
    grad = np.zeros(np.prod(grid.node_shape))
    nx, ny, nz = grid.dims
    nxn, nyn = nx + 1, ny + 1
    cells = np.arange(grid.n_cells)
    cx = cells % nx
    cy = (cells // nx) % ny
    cz = cells // (nx * ny)
    for j in range(8):
        dx, dy, dz = (j >> 0) & 1, (j >> 1) & 1, (j >> 2) & 1
        node = (cx + dx) + nxn * ((cy + dy) + nyn * (cz + dz))
        np.add.at(grad, node, d_corners[:, j])
    return value, grad.reshape(grid.node_shape, order="F")


class Adam:
    """Plain Adam over a list of arrays (decoupled from any framework)."""

    def __init__(self, arrays, lr=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            a -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class OptimProblem:
    """Everything one physics-aware optimization run needs."""

    grid_template: object  # VoxelGrid carrying dims/spacing/origin
    target_phi: np.ndarray
    material: object
    net: object
    setup: SimSetup  # loads, dirichlet, gravity; dt comes from the schedule
    phys: PhysLossConfig = field(default_factory=PhysLossConfig)
    schedule: Schedule = field(default_factory=Schedule)
    smoothing: object = None  # SmoothingConfig or None
    pen: PenaltyConfig = field(default_factory=PenaltyConfig)
    recon_weight: float = 1.0
    phys_weight: float = 1.0
    reg_weight: float = 0.0
    recon_band_cells: float = 2.0
    newton_steps: int = 5
    order: int = 2
    init_noise: float = 0.5  # cells, scales the seed noise on the raw SDF
    optimize_shape: bool = True
    optimize_stiffness: bool = False
    stiffness_cap: float = 1e4
    seed: int = 0
    linear_solver: str = "jacobi_pcg"
    snapshot_every: int = 0  # 0 disables snapshots
    volume_normalized_phys: bool = False  # alternative reading: divide by total volume


@dataclass
class OptimResult:
    grid: object
    stiffness: np.ndarray
    trace: list  # rows (iteration, recon, phys, reg, total)
    snapshots: list
    events: list


def _precondition(raw, smoothing):
    if smoothing is None:
        return raw.copy()
    return gaussian_precondition(raw, smoothing)


def _precondition_t(grad, smoothing):
    if smoothing is None:
        return grad.copy()
    return gaussian_precondition(grad, smoothing, transpose=True)


def optimize(problem):
    """Run the outer Adam loop; returns final grid, traces and snapshots."""
    rng = np.random.default_rng(problem.seed)
    template = problem.grid_template
    band = problem.recon_band_cells * template.spacing
    raw_phi = problem.target_phi + problem.init_noise * template.spacing * rng.standard_normal(
        template.node_shape
    )
    if not problem.optimize_shape:
        raw_phi = problem.target_phi.copy()
    log_cap = np.log(problem.stiffness_cap)
    raw_stiff = np.zeros(template.n_cells)

    arrays = []
    if problem.optimize_shape:
        arrays.append(raw_phi)
    if problem.optimize_stiffness:
        arrays.append(raw_stiff)
    opt = Adam(arrays, lr=problem.schedule.learning_rate)

    warm = {"nodes": None, "u": None, "cells": None, "strain": None, "rot": None, "stress": None}
    trace, snapshots, events = [], [], []
    grid = template.with_phi(_precondition(raw_phi, problem.smoothing))

    for it in range(problem.schedule.total_iters):
        phi = _precondition(raw_phi, problem.smoothing)
        grid = template.with_phi(phi)
        recon_val, recon_grad = recon_loss(phi, problem.target_phi, band)
        if problem.reg_weight > 0.0:
            reg_val, reg_grad = surface_regularizer(grid)
        else:
            reg_val, reg_grad = 0.0, np.zeros_like(phi)

        phys_val = 0.0
        phys_grad_phi = np.zeros_like(phi)
        phys_grad_stiff = np.zeros(template.n_cells)
        cls = classify_cells(grid)
        if problem.schedule.physics_active(it) and cls.active.size > 0:
            dt = problem.schedule.dt_at(it)
            setup = SimSetup(
                dt=dt,
                gravity=problem.setup.gravity,
                dirichlet=problem.setup.dirichlet,
                loads=problem.setup.loads,
                quadrature_source="neural",
            )
            dofmap = build_dofs(grid, cls, setup)
            rules = build_cell_rules(grid, cls, "neural", order=problem.order, net=problem.net)
            stiffness = np.exp(np.clip(raw_stiff, 0.0, log_cap))
            fem_problem = FemProblem(
                grid, dofmap, rules, setup, problem.material,
                stiffness_scale=stiffness[dofmap.cells],
            )
            state0 = rest_state(fem_problem)
            if warm["nodes"] is not None:
                state0 = _carry_state(state0, warm, dofmap)
            res = mixed_newton_solve(
                fem_problem, pen=problem.pen, tol=1e-6,
                max_iters=problem.newton_steps, state0=state0,
                linear_solver=problem.linear_solver,
            )
            state = res.state
            warm = {
                "nodes": dofmap.nodes, "u": state.u, "cells": dofmap.cells,
                "strain": state.strain, "rot": state.rotation, "stress": state.stress,
            }
            finite = np.all(np.isfinite(state.u))
            if not finite or (not res.converged and res.message == "line search stalled" and res.iterations == 0):
                events.append((it, "simulation stall; physics gradient skipped"))
            else:
                partials = phys_loss_mixed(fem_problem, state, problem.phys)
                if problem.volume_normalized_phys:
                    vol = max(float(np.sum(fem_problem.dmu)), 1e-30)
                    partials = _scale_partials(partials, 1.0 / vol)
                phys_val = partials.value
                adj = mixed_loss_gradient(
                    fem_problem, grid, state, problem.pen, partials, net=problem.net,
                    linear_solver=problem.linear_solver,
                )
                phys_grad_phi = adj.d_loss_d_sdf
                phys_grad_stiff = adj.d_loss_d_stiffness

        total = (
            problem.recon_weight * recon_val
            + problem.phys_weight * phys_val
            + problem.reg_weight * reg_val
        )
        d_phi = (
            problem.recon_weight * recon_grad
            + problem.phys_weight * phys_grad_phi
            + problem.reg_weight * reg_grad
        )
        grads = []
        if problem.optimize_shape:
            grads.append(_precondition_t(d_phi, problem.smoothing))
        if problem.optimize_stiffness:
            stiffness = np.exp(np.clip(raw_stiff, 0.0, log_cap))
            grads.append(problem.phys_weight * phys_grad_stiff * stiffness)
        if grads:
            opt.step(arrays, grads, lr=problem.schedule.lr_at(it))
        if problem.optimize_stiffness:
            np.clip(raw_stiff, 0.0, log_cap, out=raw_stiff)
        trace.append((it, recon_val, phys_val, reg_val, total))
        if problem.snapshot_every and it % problem.snapshot_every == 0:
            snapshots.append((it, phi.copy()))

    phi = _precondition(raw_phi, problem.smoothing)
    return OptimResult(
        template.with_phi(phi),
        np.exp(np.clip(raw_stiff, 0.0, log_cap)),
        trace,
        snapshots,
        events,
    )


def _scale_partials(partials, factor):
    partials.value *= factor
    partials.d_u *= factor
    partials.d_weights *= factor
    partials.d_points *= factor
    if partials.d_sigma is not None:
        partials.d_sigma *= factor
    return partials


def _carry_state(state, warm, dofmap):
    """Copy matching nodal/cell fields from the previous iteration's state."""
    node_map = {int(n): i for i, n in enumerate(warm["nodes"])}
    for i, n in enumerate(dofmap.nodes):
        j = node_map.get(int(n))
        if j is not None:
            state.u[i] = warm["u"][j]
    cell_map = {int(c): i for i, c in enumerate(warm["cells"])}
    for i, c in enumerate(dofmap.cells):
        j = cell_map.get(int(c))
        if j is not None:
            state.strain[i] = warm["strain"][j]
            state.rotation[i] = warm["rot"][j]
            state.stress[i] = warm["stress"][j]
    return state
