"""Model inverse Hessian used to precondition the dual ascent.

Near the zero dual the curvature of every objective here is dominated by a
block-diagonal model: the gamma block is a (scaled) Laplacian, the chi block
a pointwise multiple of the identity, and the lam block decouples over
spatial Fourier modes into small time systems

    c_e * Dt' Dt + mu(|k|^2) * Id     (trapezoid-weighted adjoint Dt'),

because divergence-free fields are orthogonal to spatial gradients slice by
slice.  One generalized eigendecomposition of (D^T W D, W) on the n_t - 1
interior slices inverts all of these systems at once; the application cost
is a pair of FFTs plus two small dense time contractions, about the cost of
one gradient evaluation.

The operator is symmetric positive definite in the same weighted inner
product the gradients are Riesz representatives of, preserves the
divergence-free and terminal conditions, and is used as the initial inverse
Hessian of the limited-memory ascent.  It only has to tame the conditioning
of the exact Hessian, not match it.
"""

from __future__ import annotations

import numpy as np

from .fields import DualState, ScalarField, SymMatrixField, VectorField
from .grid import Grid

__all__ = ["ModelPreconditioner"]


class ModelPreconditioner:
    def __init__(
        self,
        grid: Grid,
        c_e: float,
        c_strain: float,
        c_gamma: float,
        c_chi: float,
    ):
        """Coefficients: c_e scales the time stiffness, c_strain the |k|^2/2
        strain penalty on lam, c_gamma the Laplacian on gamma, c_chi the
        pointwise chi curvature (inverses of these are applied)."""
        self.grid = grid
        self.c_e = c_e
        self.c_strain = c_strain
        self.c_gamma = c_gamma
        self.c_chi = c_chi

        nt = grid.n_t
        d1 = grid._time_d1
        w = grid.time_weights
        # restrict to slices 0..n_t-2 (terminal slice is pinned to zero)
        dsub = d1[:, : nt - 1]
        wfull = np.diag(w)
        a = dsub.T @ wfull @ dsub
        wsub = np.diag(w[: nt - 1])
        # generalized symmetric eigenproblem A v = theta W v via W^{-1/2} split
        ws = np.sqrt(w[: nt - 1])
        m = (a / ws[:, None]) / ws[None, :]
        theta, u = np.linalg.eigh(0.5 * (m + m.T))
        self._theta = np.maximum(theta, 0.0)
        self._v = u / ws[:, None]  # columns W-orthonormal
        self._vt_w = self._v.T * w[None, : nt - 1]

        # effective squared wavenumbers: built from the same Nyquist-zeroed
        # multipliers as the derivative operators, so modes the derivatives
        # cannot see are not over-damped
        k2 = -grid._lap_mult
        self._k2 = k2
        inv_gamma = np.zeros_like(k2)
        np.divide(1.0, c_gamma * k2, out=inv_gamma, where=k2 > 0)
        inv_gamma[k2 <= 0] = 1.0  # gauge modes pass through
        self._inv_gamma = inv_gamma

    def _apply_lam(self, vals: np.ndarray) -> np.ndarray:
        grid = self.grid
        nt = grid.n_t
        spec = np.fft.rfftn(vals[: nt - 1], axes=grid._axes)
        # to the W-orthonormal time eigenbasis
        spec = np.tensordot(self._vt_w, spec, axes=(1, 0))
        denom = self.c_e * self._theta.reshape((nt - 1,) + (1,) * (spec.ndim - 1)) + (
            0.5 * self.c_strain * self._k2[None, None]
        )
        denom = np.maximum(denom, 1e-30)
        spec = spec / denom
        spec = np.tensordot(self._v, spec, axes=(1, 0))
        out = np.zeros_like(vals)
        out[: nt - 1] = np.fft.irfftn(spec, s=grid.spatial_shape, axes=grid._axes)
        return out

    def __call__(self, state: DualState) -> DualState:
        grid = self.grid
        lam = self._apply_lam(state.lam.values)
        gspec = np.fft.rfftn(state.gamma.values, axes=grid._axes) * self._inv_gamma
        gamma = np.fft.irfftn(gspec, s=grid.spatial_shape, axes=grid._axes)
        chi = None
        if state.chi is not None:
            chi = SymMatrixField(grid, state.chi.values / self.c_chi)
        return DualState(
            VectorField(grid, lam), ScalarField(grid, gamma), chi, state.variant
        )


def euler_preconditioner(grid: Grid, a_v: float, vbar_sq_mean: float) -> ModelPreconditioner:
    c_e = 1.0 / a_v
    c_strain = 2.0 * vbar_sq_mean / a_v + 0.1 * a_v
    return ModelPreconditioner(grid, c_e, c_strain, 1.0 / a_v, 1.0)


def ns_preconditioner(
    grid: Grid, a_v: float, a_w: float, vbar_sq_mean: float
) -> ModelPreconditioner:
    c_e = 1.0 / a_v
    c_strain = 2.0 * vbar_sq_mean / a_v + 1.0 / a_w
    return ModelPreconditioner(grid, c_e, c_strain, 1.0 / a_v, 1.0 / a_w)


def shifted_preconditioner(
    grid: Grid, a: float, penalty_coeff: float, vbar_sq_mean: float
) -> ModelPreconditioner:
    c_e = 1.0 / a
    c_strain = 2.0 * vbar_sq_mean / a + 2.0 * penalty_coeff
    return ModelPreconditioner(grid, c_e, c_strain, 1.0 / a, 2.0 * penalty_coeff)
