"""Shape-gradient sanity check: adjoint versus finite differences.

Solves a small embedded sphere under gravity, computes the gradient of a
displacement loss with respect to the nodal SDF values through the
quadrature network, and compares a few directional derivatives against
central finite differences of the full (re-solve) pipeline.

    python3 demos/adjoint_check.py path/to/quadnet.bin
"""

import sys

import numpy as np

from voxelast import shapes
from voxelast.adjoint import displacement_loss_gradient, zero_partials
from voxelast.fem import DirichletRegion, FemProblem, SimSetup, build_dofs, newton_solve
from voxelast.grid import classify_cells
from voxelast.material import Material
from voxelast.quadnet import load_params
from voxelast.rules import build_cell_rules

net = load_params(sys.argv[1], expected_order=2)
material = Material(young_modulus=1e6, poisson_ratio=0.4, density=1e3)
setup = SimSetup(gravity=(0, 0, -5.0),
                 dirichlet=[DirichletRegion((-1, -1, -1), (1e-9, 10, 10))])


def solve(grid):
    cls = classify_cells(grid)
    dofmap = build_dofs(grid, cls, setup)
    rules = build_cell_rules(grid, cls, "neural", order=2, net=net)
    problem = FemProblem(grid, dofmap, rules, setup, material)
    res = newton_solve(problem, tol=1e-12, max_iters=60, linear_solver="direct")
    assert res.converged
    return problem, res.u


grid = shapes.discretize(shapes.sphere((0.45, 0.5, 0.5), 0.42), (4, 4, 4))
problem, u = solve(grid)
partials = zero_partials(problem)
partials.value = 0.5 * float(np.sum(u**2))
partials.d_u = u.copy()
result = displacement_loss_gradient(problem, grid, u, partials, net=net,
                                    linear_solver="direct", linear_tol=1e-14, project=False)
print(f"loss = {partials.value:.3e}, |dL/dphi| max = {np.abs(result.d_loss_d_sdf).max():.3e}")

rng = np.random.default_rng(0)
step = 1e-6
print(f"{'direction':>9} {'finite diff':>14} {'adjoint':>14} {'rel err':>10}")
for k in range(5):
    v = rng.normal(size=grid.node_shape)
    v /= np.linalg.norm(v)
    hi = solve(grid.with_phi(grid.phi + step * v))
    lo = solve(grid.with_phi(grid.phi - step * v))
    fd = (0.5 * np.sum(hi[1] ** 2) - 0.5 * np.sum(lo[1] ** 2)) / (2 * step)
    an = float(np.sum(result.d_loss_d_sdf * v))
    print(f"{k:>9} {fd:>14.6e} {an:>14.6e} {abs(fd - an) / abs(fd):>10.2e}")
