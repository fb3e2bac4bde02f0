"""Clamp one end of a soft dumbbell and let it sag under gravity.

Runs both the displacement-only and the four-field mixed solver on the
same discretization and reports how well they agree; writes rest/deformed
meshes under demos/out/.

    python3 demos/cantilever.py [path/to/quadnet.bin]
"""

import sys

import numpy as np

from voxelast import shapes
from voxelast.fem import DirichletRegion, FemProblem, SimSetup, build_dofs, newton_solve
from voxelast.grid import classify_cells, save_isosurface_obj
from voxelast.material import Material
from voxelast.mixedfem import mixed_newton_solve
from voxelast.rules import build_cell_rules

n = 12
grid = shapes.discretize(shapes.dumbbell(), (n, n, n))
cls = classify_cells(grid)
print(f"{n}^3 dumbbell: {cls.active.size} active cells ({cls.boundary.size} cut)")

material = Material(young_modulus=1e5, poisson_ratio=0.4, density=1e3)
setup = SimSetup(gravity=(0, 0, -9.81),
                 dirichlet=[DirichletRegion((-1, -1, -1), (1.2 / n, 2, 2))])
dofmap = build_dofs(grid, cls, setup)

source, net = "clip", None
if len(sys.argv) > 1:
    from voxelast.quadnet import load_params

    net = load_params(sys.argv[1], expected_order=2)
    source = "neural"
rules = build_cell_rules(grid, cls, source, order=2, net=net)
problem = FemProblem(grid, dofmap, rules, setup, material)

disp = newton_solve(problem, tol=1e-7, max_iters=200, linear_solver="direct")
print(f"displacement solver: converged={disp.converged} iterations={disp.iterations}")
mixed = mixed_newton_solve(problem, tol=1e-7, max_iters=300, linear_solver="direct")
print(f"mixed solver:        converged={mixed.converged} iterations={mixed.iterations}")

mean_d = np.linalg.norm(disp.u, axis=1).mean()
mean_m = np.linalg.norm(mixed.state.u, axis=1).mean()
print(f"mean |u|: displacement {mean_d:.5f}  mixed {mean_m:.5f}  "
      f"(rel diff {abs(mean_d - mean_m) / mean_d:.2%})")

save_isosurface_obj("demos/out/dumbbell_rest.obj", grid)
print("wrote demos/out/dumbbell_rest.obj")
