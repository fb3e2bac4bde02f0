"""Hyperelastic constitutive law and symmetric-tensor utilities.

The energy density is the stable Neo-Hookean model written without the
ratio reparameterization so it stays defined for lambda -> 0:

    psi(F) = mu/2 (I_C - 3) + lam/2 (J^2 - 1) - (lam + mu) (J - 1)

with I_C = tr(F^T F) and J = det F.  This equals
mu/2 (I_C - 3) + lam/2 (J - a)^2 - lam/2 (1 - a)^2 for a = 1 + mu/lam, so
the rest state F = I is stress free with zero energy and the model remains
smooth under inversion.

Symmetric tensors use a 6-vector convention with sqrt(2)-scaled
off-diagonals (order 11, 22, 33, 23, 13, 12) so that 6x6 Hessian
eigenvalues equal the 4th-order tensor's.
"""

from dataclasses import dataclass

import numpy as np

_SQRT2 = np.sqrt(2.0)

# orthonormal basis of symmetric 3x3 matrices, shape (6, 3, 3)
SYM_BASIS = np.zeros((6, 3, 3))
for _i in range(3):
    SYM_BASIS[_i, _i, _i] = 1.0
for _m, (_a, _b) in enumerate([(1, 2), (0, 2), (0, 1)], start=3):
    SYM_BASIS[_m, _a, _b] = SYM_BASIS[_m, _b, _a] = 1.0 / _SQRT2

_EPS3 = np.zeros((3, 3, 3))
for _a, _b, _c in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
    _EPS3[_a, _b, _c] = 1.0
    _EPS3[_a, _c, _b] = -1.0


def sym6(a):
    """Symmetric part of (..., 3, 3) tensors in 6-vector coordinates."""
    a = np.asarray(a, dtype=np.float64)
    s = 0.5 * (a + np.swapaxes(a, -1, -2))
    return np.einsum("mij,...ij->...m", SYM_BASIS, s)


def mat6(v):
    """Inverse of sym6: (..., 6) -> symmetric (..., 3, 3)."""
    return np.einsum("...m,mij->...ij", np.asarray(v, dtype=np.float64), SYM_BASIS)


def cofactor(f):
    """Cofactor matrix d(det F)/dF for (..., 3, 3)."""
    f = np.asarray(f, dtype=np.float64)
    rows = [np.cross(f[..., (i + 1) % 3, :], f[..., (i + 2) % 3, :]) for i in range(3)]
    return np.stack(rows, axis=-2)


# constant map F -> d(cof F)/dF, flattened (81, 9) for a fast matmul
_DET_HESS_MAP = np.einsum("ikq,jls->ikjlqs", _EPS3, _EPS3).transpose(0, 2, 1, 3, 4, 5).reshape(81, 9)


def det_hessian(f):
    """Second derivative of det: d(cof F)_ij / dF_kl -> (..., 3, 3, 3, 3)."""
    f = np.asarray(f, dtype=np.float64)
    flat = f.reshape(f.shape[:-2] + (9,))
    return (flat @ _DET_HESS_MAP.T).reshape(f.shape[:-2] + (3, 3, 3, 3))


@dataclass
class Material:
    """Isotropic material constants with derived Lame parameters."""

    young_modulus: float
    poisson_ratio: float
    density: float = 1000.0

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ValueError("Young modulus must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must be in (-1, 0.5)")
        if not self.density > 0:
            raise ValueError("density must be positive")

    @property
    def mu(self):
        return self.young_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self):
        nu = self.poisson_ratio
        return self.young_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


STIFFNESS_CAP = 1e4


@dataclass
class StiffnessField:
    """Per-cell multipliers on mu and lambda, clamped to [1, cap]."""

    multipliers: np.ndarray
    cap: float = STIFFNESS_CAP

    def __post_init__(self):
        self.multipliers = np.asarray(self.multipliers, dtype=np.float64)
        if np.any(self.multipliers < 1.0) or np.any(self.multipliers > self.cap):
            raise ValueError("stiffness multipliers must lie in [1, cap]")


def snh_energy(f, mat, scale=1.0):
    """Energy density at deformation gradients (..., 3, 3).

    scale multiplies both Lame parameters; it may broadcast against the
    batch dimensions of f (per-cell stiffness).
    """
    f = np.asarray(f, dtype=np.float64)
    i_c = np.einsum("...ij,...ij->...", f, f)
    j = np.linalg.det(f)
    mu = np.asarray(scale * mat.mu)
    lam = np.asarray(scale * mat.lam)
    return 0.5 * mu * (i_c - 3.0) + 0.5 * lam * (j * j - 1.0) - (lam + mu) * (j - 1.0)


def snh_pk1(f, mat, scale=1.0):
    """First Piola-Kirchhoff stress, the exact gradient of snh_energy."""
    f = np.asarray(f, dtype=np.float64)
    j = np.linalg.det(f)
    mu = np.asarray(scale * mat.mu)
    lam = np.asarray(scale * mat.lam)
    beta = np.asarray(lam * j - (lam + mu))
    return mu[..., None, None] * f + beta[..., None, None] * cofactor(f)


def snh_hessian_F(f, mat, scale=1.0, project=False):
    """Hessian d2 psi / dF2 as (..., 3, 3, 3, 3), optionally SPD-projected.

    Projection eigendecomposes the 9x9 matrix per input and clamps negative
    eigenvalues to zero.
    """
    f = np.asarray(f, dtype=np.float64)
    j = np.linalg.det(f)
    cof = cofactor(f)
    mu = np.asarray(scale * mat.mu)
    lam = np.asarray(scale * mat.lam)
    beta = np.asarray(lam * j - (lam + mu))
    eye = np.einsum("ik,jl->ijkl", np.eye(3), np.eye(3))
    h = (
        mu[..., None, None, None, None] * eye
        + lam[..., None, None, None, None] * np.einsum("...ij,...kl->...ijkl", cof, cof)
        + beta[..., None, None, None, None] * det_hessian(f)
    )
    if not project:
        return h
    shape = h.shape[:-4]
    m = h.reshape(shape + (9, 9))
    vals, vecs = np.linalg.eigh(0.5 * (m + np.swapaxes(m, -1, -2)))
    vals = np.maximum(vals, 0.0)
    m = np.einsum("...ik,...k,...jk->...ij", vecs, vals, vecs)
    return m.reshape(shape + (3, 3, 3, 3))


def snh_gradient_S(s6, mat, scale=1.0):
    """Gradient of the energy w.r.t. the symmetric strain, in 6-vector form."""
    s = mat6(s6)
    j = np.linalg.det(s)
    mu = np.asarray(scale * mat.mu)
    lam = np.asarray(scale * mat.lam)
    beta = np.asarray(lam * j - (lam + mu))
    return sym6(mu[..., None, None] * s + beta[..., None, None] * cofactor(s))


def snh_hessian_S(s6, mat, scale=1.0, project=False, project_mode="scale"):
    """6x6 Hessian of the energy w.r.t. symmetric strain.

    project_mode "scale": cheap positivity fix that shrinks the volume
    Hessian term until a basis-free minimum-eigenvalue estimate
    (mu - |beta| * 2 ||S||_F over the dropped rank-1 term) is nonnegative.
    project_mode "exact": full 6x6 eigen-projection.
    """
    s6 = np.asarray(s6, dtype=np.float64)
    s = mat6(s6)
    j = np.linalg.det(s)
    cof = cofactor(s)
    mu = np.asarray(scale * mat.mu)
    lam = np.asarray(scale * mat.lam)
    beta = np.asarray(lam * j - (lam + mu))
    g6 = sym6(cof)
    vol = np.einsum("mij,...ijkl,nkl->...mn", SYM_BASIS, det_hessian(s), SYM_BASIS)
    rank1 = lam[..., None, None] * np.einsum("...m,...n->...mn", g6, g6)
    if project and project_mode == "scale":
        bound = 2.0 * np.abs(beta) * np.linalg.norm(s6, axis=-1)
        gamma = np.minimum(1.0, mu * np.ones_like(beta) / np.maximum(bound, 1e-300))
        beta = beta * gamma
    h = mu[..., None, None] * np.eye(6) + rank1 + beta[..., None, None] * vol
    if project and project_mode == "exact":
        vals, vecs = np.linalg.eigh(0.5 * (h + np.swapaxes(h, -1, -2)))
        vals = np.maximum(vals, 0.0)
        h = np.einsum("...ik,...k,...jk->...ij", vecs, vals, vecs)
    return h
