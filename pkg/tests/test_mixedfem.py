import numpy as np

from voxelast.fem import DirichletRegion, FemProblem, SimSetup, build_dofs, newton_solve
from voxelast.grid import classify_cells, make_grid
from voxelast.material import Material, mat6, snh_pk1, sym6
from voxelast.mixedfem import (
    MixedState,
    PenaltyConfig,
    assemble_mixed_system,
    axial,
    condense_and_solve,
    constraint_residual,
    cross_matrix,
    merit_value,
    mixed_newton_solve,
    polar_rotation,
    rest_state,
    update_rotations,
)
from voxelast.rules import build_cell_rules

MAT = Material(young_modulus=1e5, poisson_ratio=0.4, density=1e3)


def make_problem(n=2, setup=None, spacing=0.5, mat=MAT, stiffness=None):
    g = make_grid((n, n, n), spacing, fill=-1.0)
    cls = classify_cells(g)
    setup = setup or SimSetup(
        gravity=(0, 0, -9.81),
        dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))],
    )
    dofmap = build_dofs(g, cls, setup)
    rules = build_cell_rules(g, cls, "full", order=2)
    return FemProblem(g, dofmap, rules, setup, mat, stiffness_scale=stiffness)


def random_state(problem, rng, scale=0.1):
    nc, nq, _ = problem.shape_vals.shape
    u = scale * rng.normal(size=(problem.dofmap.n_nodes, 3))
    u[problem.dofmap.fixed_mask] = 0.0
    strain = sym6(np.eye(3)) + scale * rng.normal(size=(nc, nq, 6))
    rotation = polar_rotation(np.eye(3) + scale * rng.normal(size=(nc, nq, 3, 3)))
    stress = scale * MAT.young_modulus * rng.normal(size=(nc, nq, 3, 3))
    return MixedState(u, strain, rotation, stress)


def test_cross_matrix_and_axial_roundtrip():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(5, 3))
    m = cross_matrix(w)
    v = rng.normal(size=3)
    for i in range(5):
        assert np.abs(m[i] @ v - np.cross(w[i], v)).max() < 1e-14
    assert np.abs(axial(m) - w).max() < 1e-14


def test_polar_rotation_properties():
    rng = np.random.default_rng(1)
    m = np.eye(3) + 0.5 * rng.normal(size=(4, 3, 3))
    r = polar_rotation(m)
    err = np.swapaxes(r, -1, -2) @ r - np.eye(3)
    assert np.abs(err).max() < 1e-12
    assert np.abs(np.linalg.det(r) - 1.0).max() < 1e-12


def test_update_rotations_zero_step():
    rng = np.random.default_rng(2)
    r = polar_rotation(np.eye(3) + 0.3 * rng.normal(size=(3, 3, 3)))
    r2, flagged = update_rotations(r, np.zeros((3, 3)))
    assert not flagged
    assert np.abs(r2 - r).max() < 1e-12


def test_update_rotations_matches_exponential_map():
    theta = 1e-3
    axis = np.array([1.0, 2.0, -0.5])
    axis /= np.linalg.norm(axis)
    omega = (theta * axis)[None, :]
    r0 = np.eye(3)[None, :, :]
    r1, _ = update_rotations(r0, omega)
    # Rodrigues formula
    k = cross_matrix(axis[None])[0]
    exact = np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)
    assert np.abs(r1[0] - exact).max() < 1e-6  # O(theta^2) before projection
    assert np.abs(r1[0].T @ r1[0] - np.eye(3)).max() < 1e-12


def test_constraint_residual_rest_and_linearity():
    p = make_problem(2)
    state = rest_state(p)
    c = constraint_residual(state, p)
    assert np.abs(c).max() < 1e-14
    # doubling S at one node changes the residual by -R S there
    state2 = state.copy()
    state2.strain[0, 0] *= 2.0
    c2 = constraint_residual(state2, p)
    expected = -state.rotation[0, 0] @ mat6(state.strain[0, 0])
    assert np.abs((c2 - c)[0, 0] - expected).max() < 1e-12
    mask = np.ones(c.shape[:2], dtype=bool)
    mask[0, 0] = False
    assert np.abs((c2 - c)[mask]).max() == 0.0


def test_rest_state_rhs_zero_without_loads():
    setup = SimSetup(dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))])
    p = make_problem(2, setup=setup)
    state = rest_state(p)
    blocks = assemble_mixed_system(p, state, PenaltyConfig(epsilon=1e4))
    assert np.abs(blocks.g_u).max() < 1e-10
    assert np.abs(blocks.g_s).max() < 1e-10
    assert np.abs(blocks.g_r).max() < 1e-10
    assert np.abs(blocks.g_sigma).max() < 1e-10


def test_h_block_eigenvalues_shifted_by_epsilon():
    p = make_problem(2)
    rng = np.random.default_rng(3)
    state = random_state(p, rng)
    eps = 12345.0
    blocks = assemble_mixed_system(p, state, PenaltyConfig(epsilon=eps))
    h = np.linalg.inv(blocks.h_inv)  # unweighted H
    vals = np.linalg.eigvalsh(h)
    assert vals.min() >= eps - 1e-6 * eps


def test_lambda_blocks_spd():
    p = make_problem(2)
    rng = np.random.default_rng(4)
    state = random_state(p, rng)
    blocks = assemble_mixed_system(p, state, PenaltyConfig(epsilon=1e4))
    lam = np.linalg.inv(blocks.lam_inv)
    asym = np.abs(lam - np.swapaxes(lam, -1, -2)).max()
    assert asym < 1e-8 * np.abs(lam).max()
    assert np.linalg.eigvalsh(lam).min() > 0.0


def dense_saddle_solve(p, blocks):
    """Independent dense solve of the full 4x4 block system on a small problem."""
    free = p.dofmap.free_dofs()
    nu = int(free.sum())
    nc, nq = blocks.dmu.shape
    npts = nc * nq
    dim = nu + npts * (6 + 3 + 9)
    a = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    dmu = blocks.dmu.reshape(-1)
    h = np.linalg.inv(blocks.h_inv).reshape(npts, 6, 6) * dmu[:, None, None]
    e = np.linalg.inv(blocks.e_inv).reshape(npts, 3, 3) * dmu[:, None, None]
    k = blocks.k_tilde.reshape(npts, 9, 6) * dmu[:, None, None]
    l = blocks.l_tilde.reshape(npts, 9, 3) * dmu[:, None, None]
    b_full = blocks.b_op.reshape(nc, nq, 9, 24)
    # scatter B into global (free) displacement columns
    cu = np.zeros((npts, 9, 3 * p.dofmap.n_nodes))
    for c in range(nc):
        dof = (3 * p.dofmap.cell_nodes[c][:, None] + np.arange(3)).reshape(24)
        for q in range(nq):
            cu[c * nq + q][:, dof] += blocks.dmu[c, q] * b_full[c, q]
    cu = cu[:, :, free]
    s0, r0, g0 = nu, nu + 6 * npts, nu + 9 * npts
    # u rows: A=0 quasistatic
    for pt in range(npts):
        sl_s = slice(s0 + 6 * pt, s0 + 6 * pt + 6)
        sl_r = slice(r0 + 3 * pt, r0 + 3 * pt + 3)
        sl_g = slice(g0 + 9 * pt, g0 + 9 * pt + 9)
        a[sl_s, sl_s] = h[pt]
        a[sl_r, sl_r] = e[pt]
        a[sl_s, sl_g] = k[pt].T
        a[sl_g, sl_s] = k[pt]
        a[sl_r, sl_g] = l[pt].T
        a[sl_g, sl_r] = l[pt]
        a[sl_g, :nu] = cu[pt]
        a[:nu, sl_g] = cu[pt].T
        rhs[sl_s] = blocks.dmu.reshape(-1)[pt] * blocks.g_s.reshape(npts, 6)[pt]
        rhs[sl_r] = blocks.dmu.reshape(-1)[pt] * blocks.g_r.reshape(npts, 3)[pt]
        rhs[sl_g] = blocks.dmu.reshape(-1)[pt] * blocks.g_sigma.reshape(npts, 9)[pt]
    rhs[:nu] = blocks.g_u[free]
    sol = np.linalg.solve(a, rhs)
    return sol[:nu], sol[s0:r0].reshape(npts, 6), sol[r0:g0].reshape(npts, 3), sol[g0:].reshape(npts, 9)


def test_condensation_matches_dense_saddle_solve():
    # single-cell problem with nonzero residuals
    setup = SimSetup(
        gravity=(0, 0, -9.81),
        dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))],
    )
    p = make_problem(1, setup=setup, spacing=1.0)
    rng = np.random.default_rng(5)
    state = random_state(p, rng, scale=0.05)
    blocks = assemble_mixed_system(p, state, PenaltyConfig(epsilon=1e4))
    du, d_strain, d_omega, d_sigma, _ = condense_and_solve(
        blocks, p, linear_solver="direct"
    )
    du_d, ds_d, dw_d, dsig_d = dense_saddle_solve(p, blocks)
    free = p.dofmap.free_dofs()
    scale = max(np.abs(du_d).max(), 1e-12)
    assert np.abs(du.reshape(-1)[free] - du_d).max() / scale < 1e-8
    npts = d_strain.shape[0] * d_strain.shape[1]
    assert np.abs(d_strain.reshape(npts, 6) - ds_d).max() / max(np.abs(ds_d).max(), 1e-12) < 1e-8
    assert np.abs(d_omega.reshape(npts, 3) - dw_d).max() / max(np.abs(dw_d).max(), 1e-12) < 1e-8
    assert np.abs(d_sigma.reshape(npts, 9) - dsig_d).max() / max(np.abs(dsig_d).max(), 1e-12) < 1e-8


def test_block_system_first_order_consistency():
    # applying the assembled (unprojected-regime) operator to a small step
    # reproduces the finite-difference change of the nonlinear residual
    setup = SimSetup(
        gravity=(0, 0, -1e-3),
        dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))],
    )
    p = make_problem(1, setup=setup, spacing=1.0)
    pen = PenaltyConfig(
        epsilon=1e4, theta_mode="constant", theta_const=0.0, hessian_projection="exact"
    )
    state = rest_state(p)  # near rest the Hessian is PSD and cross terms vanish
    blocks = assemble_mixed_system(p, state, pen)
    rng = np.random.default_rng(6)
    h = 1e-7
    d_strain = rng.normal(size=state.strain.shape)
    free = p.dofmap.free_dofs()

    def strain_residual(s):
        st = MixedState(state.u, s, state.rotation, state.stress)
        bl = assemble_mixed_system(p, st, pen)
        return -bl.g_s  # the unweighted strain residual

    fd = (strain_residual(state.strain + h * d_strain) - strain_residual(state.strain - h * d_strain)) / (2 * h)
    h_mat = np.linalg.inv(blocks.h_inv)
    applied = np.einsum("cqij,cqj->cqi", h_mat, d_strain)
    assert np.abs(fd - applied).max() / np.abs(applied).max() < 1e-4
    del free


def test_merit_at_feasible_state_equals_potential():
    p = make_problem(2)
    state = rest_state(p)
    from voxelast.mixedfem import merit_weight
    e_weight = merit_weight(p)
    val = merit_value(state, p, e_weight)
    # feasible rest state: psi(I) = 0, so merit is just -b(u) = 0 at u = 0
    assert abs(val) < 1e-12


def test_mixed_matches_displacement_fem_on_cantilever():
    setup = SimSetup(
        gravity=(0, 0, -9.81),
        dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))],
    )
    p = make_problem(3, setup=setup, spacing=1.0 / 3)
    disp = newton_solve(p, tol=1e-9, max_iters=60)
    assert disp.converged
    mixed = mixed_newton_solve(p, tol=1e-7, max_iters=150, linear_solver="direct")
    assert mixed.converged, mixed.message
    mean_disp = np.linalg.norm(disp.u, axis=1).mean()
    mean_mixed = np.linalg.norm(mixed.state.u, axis=1).mean()
    assert abs(mean_mixed - mean_disp) <= 0.01 * mean_disp


def test_mixed_converged_stress_matches_pk1():
    setup = SimSetup(
        gravity=(0, 0, -9.81),
        dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))],
    )
    p = make_problem(2, setup=setup)
    res = mixed_newton_solve(p, tol=1e-9, max_iters=200, linear_solver="direct")
    assert res.converged
    rs = res.state.rotation @ mat6(res.state.strain)
    pk1 = snh_pk1(rs, MAT)
    num = np.linalg.norm(res.state.stress - pk1, axis=(-2, -1))
    den = np.linalg.norm(res.state.stress, axis=(-2, -1))
    assert (num / np.maximum(den, 1e-12)).max() < 1e-3


def test_epsilon_invariance_of_solution():
    setup = SimSetup(
        gravity=(0, 0, -9.81),
        dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))],
    )
    sigma_hat = PenaltyConfig().resolve_epsilon(
        make_problem(2, setup=setup).grid, MAT, setup
    )
    solutions = []
    for factor in (0.1, 1.0, 10.0):
        p = make_problem(2, setup=setup)
        res = mixed_newton_solve(
            p, pen=PenaltyConfig(epsilon=factor * sigma_hat), tol=1e-8,
            max_iters=300, linear_solver="direct",
        )
        assert res.converged, (factor, res.message)
        solutions.append(np.linalg.norm(res.state.u, axis=1).mean())
    ref = solutions[1]
    for s in solutions:
        assert abs(s - ref) <= 0.01 * ref


def test_constraint_norm_decreases_below_tolerance():
    setup = SimSetup(
        gravity=(0, 0, -9.81),
        dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))],
    )
    p = make_problem(2, setup=setup)
    res = mixed_newton_solve(p, tol=1e-8, max_iters=200, linear_solver="direct")
    assert res.converged
    c = constraint_residual(res.state, p)
    assert np.linalg.norm(c, axis=(-2, -1)).max() <= 1e-8


def test_merit_decreases_on_cantilever_run():
    setup = SimSetup(
        gravity=(0, 0, -9.81),
        dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))],
    )
    p = make_problem(3, setup=setup, spacing=1.0 / 3)
    res = mixed_newton_solve(p, tol=1e-7, max_iters=200, linear_solver="direct")
    assert res.converged
    merits = [row[1] for row in res.trace]
    for a, b in zip(merits, merits[1:]):
        assert b <= a + 1e-12 * (1 + abs(a))
