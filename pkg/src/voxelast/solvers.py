"""Linear solvers shared by the displacement and mixed FEM paths."""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


def jacobi_pcg(a, b, tol=1e-8, max_iters=None, x0=None):
    """Jacobi-preconditioned conjugate gradients on a sparse SPD matrix.

    Stops at relative residual tol; returns (x, info) where info records
    iterations, the achieved relative residual, and a convergence flag.
    """
    n = b.size
    if max_iters is None:
        max_iters = 10 * n
    diag = a.diagonal()
    inv_diag = np.where(np.abs(diag) > 1e-300, 1.0 / diag, 1.0)
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - a @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), {"iterations": 0, "relres": 0.0, "converged": True}
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    best_x, best_res = x.copy(), np.linalg.norm(r) / bnorm
    it = 0
    while it < max_iters:
        res = np.linalg.norm(r) / bnorm
        if res < best_res:
            best_res = res
            best_x = x.copy()
        if res <= tol:
            return x, {"iterations": it, "relres": res, "converged": True}
        ap = a @ p
        pap = p @ ap
        if pap <= 0.0:
            break  # lost positive-definiteness; bail out with best iterate
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    res = np.linalg.norm(b - a @ x) / bnorm
    if res < best_res:
        best_res, best_x = res, x
    return best_x, {"iterations": it, "relres": best_res, "converged": best_res <= tol}


def solve_spd(a, b, method="jacobi_pcg", tol=1e-8, max_iters=None, x0=None):
    """Dispatch to Jacobi-PCG (default) or a sparse direct factorization."""
    if method == "jacobi_pcg":
        return jacobi_pcg(a, b, tol=tol, max_iters=max_iters, x0=x0)
    if method == "direct":
        lu = spla.splu(sp.csc_matrix(a))
        x = lu.solve(b)
        relres = np.linalg.norm(b - a @ x) / max(np.linalg.norm(b), 1e-300)
        return x, {"iterations": 1, "relres": relres, "converged": True}
    raise ValueError(f"unknown linear solver {method!r}")
