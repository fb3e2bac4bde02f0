"""Compare quadrature rules on implicitly cut cells.

Builds the ground-truth integrals for a slanted-plane cell, then evaluates
the Full, Clip, weight-only moment-fit and (if a trained file is present)
neural rules against them.  Run from the repository root:

    python3 demos/quadrature_rules.py [path/to/quadnet.bin]
"""

import sys

import numpy as np

from voxelast import hexa
from voxelast.quadrature import (
    QuadratureRule,
    TestBasis,
    clip_rule,
    conditioning,
    gauss_legendre_rule,
    ground_truth_integrals,
    moment_fit_weights,
    quad_error,
)

basis = TestBasis(2)
normal = np.array([0.3, 0.5, 0.81])
normal /= np.linalg.norm(normal)
corner_phi = hexa.CORNERS @ normal - 0.55 * normal.sum()
gt = ground_truth_integrals(corner_phi, basis, res=64)
print(f"plane-cut cell, material volume = {gt.sum():.4f}")

rules = {
    "full": gauss_legendre_rule(2),
    "clip": clip_rule(corner_phi, 2),
    "moment_fit": moment_fit_weights(corner_phi, basis, res=64),
}
if len(sys.argv) > 1:
    from voxelast.quadnet import load_params, rule_for_cell

    net = load_params(sys.argv[1], expected_order=2)
    rules["neural"] = rule_for_cell(net, corner_phi)

print(f"{'rule':<12}{'moment error':>14}{'weight sum':>12}{'conditioning':>14}")
for name, rule in rules.items():
    err = quad_error(rule, gt, basis)
    print(f"{name:<12}{err:>14.6f}{rule.total_weight():>12.4f}{conditioning(rule):>14.4g}")
