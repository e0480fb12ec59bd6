"""Inversion-robust Neo-Hookean energy density and its first two derivatives.

The energy is

    psi(F) = mu/2 (tr(F^T F) - 3) + lambda/2 (det F - alpha)^2,
    alpha  = 1 + mu/lambda,

the minimal variant with zero stress at F = I that stays defined for inverted
elements (det F <= 0). All functions accept a single 3x3 matrix or a batch
(..., 3, 3) and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import ValidationError

# Levi-Civita tensor, used by the cofactor derivative.
_EPS3 = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _EPS3[_i, _j, _k] = 1.0
    _EPS3[_i, _k, _j] = -1.0


@dataclass(frozen=True)
class Material:
    """Isotropic hyperelastic material parameterized by (E, nu).

    E = 0 is allowed so integrators can be exercised with elasticity switched
    off; mu and lam are the standard 3-D Lame constants.
    """

    youngs_modulus: float
    poisson_ratio: float

    def __post_init__(self):
        if self.youngs_modulus < 0:
            raise ValidationError("Young's modulus must be non-negative")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValidationError("Poisson ratio must lie in [0, 0.5)")

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        nu = self.poisson_ratio
        return self.youngs_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def rest_det(self) -> float:
        """The alpha shift making F = I stress-free."""
        lam = self.lam
        return 1.0 + self.mu / lam if lam > 0 else 1.0


def cofactor(F: NDArray[np.float64]) -> NDArray[np.float64]:
    """Cofactor matrix, d(det F)/dF; columns are cross products of F's columns."""
    c0, c1, c2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    return np.stack([np.cross(c1, c2), np.cross(c2, c0), np.cross(c0, c1)], axis=-1)


def energy_density(mat: Material, F: NDArray[np.float64]) -> float | NDArray[np.float64]:
    """psi(F) in J/m^3; batched over leading axes of F."""
    F = np.asarray(F, dtype=np.float64)
    ic = np.einsum("...ij,...ij->...", F, F)
    J = np.linalg.det(F)
    psi = 0.5 * mat.mu * (ic - 3.0) + 0.5 * mat.lam * (J - mat.rest_det) ** 2
    return float(psi) if psi.ndim == 0 else psi


def energy_gradient(mat: Material, F: NDArray[np.float64]) -> NDArray[np.float64]:
    """First Piola-Kirchhoff stress dpsi/dF = mu F + lambda (J - alpha) cof F."""
    F = np.asarray(F, dtype=np.float64)
    J = np.linalg.det(F)
    return mat.mu * F + (mat.lam * (J - mat.rest_det))[..., None, None] * cofactor(F)


def energy_hessian(mat: Material, F: NDArray[np.float64]) -> NDArray[np.float64]:
    """Exact 9x9 Hessian d^2 psi/dF^2 with row-major vec convention.

    vec(A)[3*i + j] = A[i, j]; the result is symmetric. Batched input
    (..., 3, 3) yields (..., 9, 9).
    """
    F = np.asarray(F, dtype=np.float64)
    batch = F.shape[:-2]
    J = np.linalg.det(F)
    cof = cofactor(F).reshape(batch + (9,))
    H = mat.mu * np.broadcast_to(np.eye(9), batch + (9, 9)).copy()
    H += mat.lam * cof[..., :, None] * cof[..., None, :]
    # d(cof F)_ij / dF_kl = eps_ikm eps_jln F_mn
    dcof = np.einsum("ikm,jln,...mn->...ijkl", _EPS3, _EPS3, F)
    H += (mat.lam * (J - mat.rest_det))[..., None, None] * dcof.reshape(batch + (9, 9))
    return H
