"""Uniform space-time grids on the periodic torus and their calculus.

Space is the unit torus [0,1)^d sampled on ``n`` points per axis with Fourier
collocation: first derivatives, the inverse Laplacian and the divergence-free
(Leray) projection are diagonal in Fourier space and exact on resolved modes.
First derivatives drop the Nyquist mode so that differentiation is exactly
skew-adjoint on real fields; products of grid fields are not dealiased, so
experiments pick resolutions that keep their fields band-limited.

Time is [0, T] on ``n_t`` uniform slices with second-order finite differences
(one-sided at both ends) and trapezoidal quadrature.  A fourth-order stencil
is kept alongside for residual checks that need a time derivative independent
of the production one.

Array convention: fields are ``float64`` arrays of shape ``(n_t, *spatial)``
for scalars, with an extra component axis inserted before the spatial axes
for vectors (``d`` components) and symmetric matrices (``d*(d+1)//2`` stored
entries, upper triangle row-major).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = ["Grid", "make_grid", "SYM_PAIRS", "SYM_WEIGHTS", "sym_slot"]

# Stored entries of a symmetric d x d matrix, upper triangle row-major,
# and their multiplicity in the Frobenius inner product.
SYM_PAIRS = {
    2: ((0, 0), (0, 1), (1, 1)),
    3: ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)),
}
SYM_WEIGHTS = {
    2: (1.0, 2.0, 1.0),
    3: (1.0, 2.0, 2.0, 1.0, 2.0, 1.0),
}

_SYM_SLOT = {
    d: {pair: s for s, pair in enumerate(pairs)} for d, pairs in SYM_PAIRS.items()
}


def sym_slot(d: int, i: int, j: int) -> int:
    """Storage slot of entry (i, j) of a symmetric d x d matrix."""
    return _SYM_SLOT[d][(i, j) if i <= j else (j, i)]


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Space-time grid: d-torus with n points per axis, n_t time slices on [0, T]."""

    d: int
    n: int
    n_t: int
    t_final: float

    @property
    def dx(self) -> float:
        return 1.0 / self.n

    @property
    def dt(self) -> float:
        return self.t_final / (self.n_t - 1)

    @property
    def n_sym(self) -> int:
        return self.d * (self.d + 1) // 2

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def scalar_shape(self) -> tuple[int, ...]:
        return (self.n_t,) + self.spatial_shape

    @property
    def vector_shape(self) -> tuple[int, ...]:
        return (self.n_t, self.d) + self.spatial_shape

    @property
    def sym_shape(self) -> tuple[int, ...]:
        return (self.n_t, self.n_sym) + self.spatial_shape

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_t)

    def coords(self) -> tuple[np.ndarray, ...]:
        """Spatial coordinate arrays, each of shape ``spatial_shape``."""
        axes = [np.arange(self.n) * self.dx for _ in range(self.d)]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    # ------------------------------------------------------------------
    # spectral machinery

    @property
    def _axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d, 0))

    @cached_property
    def _wavenumbers(self) -> tuple[np.ndarray, ...]:
        """2*pi*integer frequencies per spatial axis, shaped for rfftn output."""
        ks = []
        for a in range(self.d):
            if a == self.d - 1:
                k = 2.0 * np.pi * np.arange(self.n // 2 + 1)
            else:
                k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)
            shape = [1] * self.d
            shape[a] = k.size
            ks.append(k.reshape(shape))
        return tuple(ks)

    @cached_property
    def _deriv_mults(self) -> tuple[np.ndarray, ...]:
        """i*k multipliers with the Nyquist mode of the differenced axis zeroed."""
        nyq = np.pi * self.n
        mults = []
        for k in self._wavenumbers:
            m = 1j * k
            m[np.abs(k) >= nyq - 1e-9] = 0.0
            mults.append(m)
        return tuple(mults)

    @cached_property
    def _lap_mult(self) -> np.ndarray:
        # composed as div(grad(.)): consistent with the first derivatives, so
        # the Leray composition annihilates divergence exactly at every mode
        return sum(m * m for m in self._deriv_mults).real

    @cached_property
    def _inv_lap_mult(self) -> np.ndarray:
        lap = self._lap_mult
        out = np.zeros_like(lap)
        np.divide(1.0, lap, out=out, where=lap < 0)
        return out

    @cached_property
    def _int_wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Integer mode indices per axis (same shapes as ``_wavenumbers``)."""
        ks = []
        for a in range(self.d):
            if a == self.d - 1:
                k = np.arange(self.n // 2 + 1)
            else:
                k = np.rint(np.fft.fftfreq(self.n, d=1.0 / self.n)).astype(int)
            shape = [1] * self.d
            shape[a] = k.size
            ks.append(k.reshape(shape))
        return tuple(ks)

    def _fwd(self, arr: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(arr, axes=self._axes)

    def _inv(self, spec: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(spec, s=self.spatial_shape, axes=self._axes)

    # ------------------------------------------------------------------
    # spatial operators (act on the trailing d axes; leading axes are batch)

    def grad(self, arr: np.ndarray) -> np.ndarray:
        """(..., *s) -> (..., d, *s), component i is the derivative along axis i."""
        spec = self._fwd(arr)
        comps = [self._inv(spec * m) for m in self._deriv_mults]
        return np.stack(comps, axis=arr.ndim - self.d)

    def div(self, arr: np.ndarray) -> np.ndarray:
        """(..., d, *s) -> (..., *s)."""
        spec = self._fwd(arr)
        caxis = arr.ndim - self.d - 1
        acc = sum(
            np.take(spec, a, axis=caxis) * self._deriv_mults[a] for a in range(self.d)
        )
        return self._inv(acc)

    def sym_grad(self, arr: np.ndarray) -> np.ndarray:
        """Symmetrized gradient of a vector field: (..., d, *s) -> (..., m, *s)."""
        spec = self._fwd(arr)
        caxis = arr.ndim - self.d - 1
        comps = []
        for i, j in SYM_PAIRS[self.d]:
            if i == j:
                g = np.take(spec, i, axis=caxis) * self._deriv_mults[i]
            else:
                g = 0.5 * (
                    np.take(spec, j, axis=caxis) * self._deriv_mults[i]
                    + np.take(spec, i, axis=caxis) * self._deriv_mults[j]
                )
            comps.append(self._inv(g))
        return np.stack(comps, axis=caxis)

    def div_sym(self, arr: np.ndarray) -> np.ndarray:
        """Row divergence of a symmetric matrix field: (..., m, *s) -> (..., d, *s)."""
        spec = self._fwd(arr)
        caxis = arr.ndim - self.d - 1
        comps = []
        for i in range(self.d):
            acc = sum(
                np.take(spec, sym_slot(self.d, i, l), axis=caxis)
                * self._deriv_mults[l]
                for l in range(self.d)
            )
            comps.append(self._inv(acc))
        return np.stack(comps, axis=caxis)

    def hessian(self, arr: np.ndarray) -> np.ndarray:
        """Second derivatives of a scalar field in symmetric storage."""
        spec = self._fwd(arr)
        comps = [
            self._inv(spec * self._deriv_mults[i] * self._deriv_mults[j])
            for i, j in SYM_PAIRS[self.d]
        ]
        return np.stack(comps, axis=arr.ndim - self.d)

    def laplacian(self, arr: np.ndarray) -> np.ndarray:
        return self._inv(self._fwd(arr) * self._lap_mult)

    def inv_laplacian(self, arr: np.ndarray) -> np.ndarray:
        """Zero-mean solution of Laplace(g) = arr - mean(arr), per slice."""
        return self._inv(self._fwd(arr) * self._inv_lap_mult)

    def leray(self, arr: np.ndarray) -> np.ndarray:
        """Remove the gradient part: u - grad(invlap(div u)). Mean modes pass through."""
        phi = self.inv_laplacian(self.div(arr))
        return arr - self.grad(phi)

    def lowpass(self, arr: np.ndarray, k_max: int) -> np.ndarray:
        """Sharp spectral cutoff: zero all modes with any |k_axis| > k_max."""
        spec = self._fwd(arr)
        mask = np.ones(spec.shape[-self.d :], dtype=bool)
        for k in self._int_wavenumbers:
            mask &= np.abs(k) <= k_max
        return self._inv(spec * mask)

    def spatial_mean(self, arr: np.ndarray) -> np.ndarray:
        """Mean over the spatial axes, keeping leading axes."""
        return arr.mean(axis=self._axes)

    # ------------------------------------------------------------------
    # time operators (act on axis 0)

    @cached_property
    def time_weights(self) -> np.ndarray:
        w = np.ones(self.n_t)
        w[0] = w[-1] = 0.5
        return w

    @cached_property
    def _time_d1(self) -> np.ndarray:
        nt, dt = self.n_t, self.dt
        D = np.zeros((nt, nt))
        D[0, :3] = (-3.0, 4.0, -1.0)
        for k in range(1, nt - 1):
            D[k, k - 1] = -1.0
            D[k, k + 1] = 1.0
        D[-1, -3:] = (1.0, -4.0, 3.0)
        return D / (2.0 * dt)

    @cached_property
    def _time_d1_adj(self) -> np.ndarray:
        # adjoint with respect to the trapezoid-weighted inner product
        w = self.time_weights
        return (self._time_d1.T * w[None, :]) / w[:, None]

    @cached_property
    def _time_d4(self) -> np.ndarray:
        nt, dt = self.n_t, self.dt
        if nt < 5:
            return self._time_d1
        D = np.zeros((nt, nt))
        D[0, :5] = (-25.0, 48.0, -36.0, 16.0, -3.0)
        D[1, :5] = (-3.0, -10.0, 18.0, -6.0, 1.0)
        for k in range(2, nt - 2):
            D[k, k - 2 : k + 3] = (1.0, -8.0, 0.0, 8.0, -1.0)
        D[-2, -5:] = (-1.0, 6.0, -18.0, 10.0, 3.0)
        D[-1, -5:] = (3.0, -16.0, 36.0, -48.0, 25.0)
        return D / (12.0 * dt)

    def _apply_time(self, mat: np.ndarray, arr: np.ndarray) -> np.ndarray:
        return np.tensordot(mat, arr, axes=(1, 0))

    def time_derivative(self, arr: np.ndarray, terminal_zero: bool = False) -> np.ndarray:
        """Second-order time derivative along axis 0.

        With ``terminal_zero`` the input is treated as a member of the class
        vanishing at t = T: the final slice is zeroed before differencing.
        """
        if terminal_zero:
            arr = arr.copy()
            arr[-1] = 0.0
        return self._apply_time(self._time_d1, arr)

    def time_derivative_adjoint(
        self, arr: np.ndarray, terminal_zero: bool = True
    ) -> np.ndarray:
        """Adjoint of ``time_derivative`` in the trapezoid-weighted inner product."""
        out = self._apply_time(self._time_d1_adj, arr)
        if terminal_zero:
            out[-1] = 0.0
        return out

    def time_derivative_check(self, arr: np.ndarray) -> np.ndarray:
        """Independent fourth-order time derivative, for residual oracles."""
        return self._apply_time(self._time_d4, arr)

    def time_tail_integral(self, arr: np.ndarray) -> np.ndarray:
        """Trapezoid integral from t_k to T along axis 0: out[k] = int_{t_k}^T arr."""
        out = np.zeros_like(arr)
        for k in range(self.n_t - 2, -1, -1):
            out[k] = out[k + 1] + 0.5 * self.dt * (arr[k] + arr[k + 1])
        return out

    # ------------------------------------------------------------------
    # quadrature

    def integrate(self, arr: np.ndarray) -> float:
        """Space-time integral of a scalar integrand (n_t, *s)."""
        per_slice = arr.reshape(self.n_t, -1).sum(axis=1) * self.dx**self.d
        return float(np.dot(self.time_weights, per_slice) * self.dt)

    def integrate_space(self, arr: np.ndarray) -> float:
        """Spatial integral of a single slice (*s,)."""
        return float(arr.sum() * self.dx**self.d)


def make_grid(d: int, n: int, n_t: int, t_final: float) -> Grid:
    """Validated grid constructor.

    Requires d in {2, 3}, n a power of two with n >= 4, n_t >= 3 and
    t_final > 0.  Slice k sits at t = k * t_final / (n_t - 1).
    """
    if d not in (2, 3):
        raise ValueError(f"spatial dimension must be 2 or 3, got {d}")
    if n < 4 or not _is_power_of_two(n):
        raise ValueError(f"n must be a power of two >= 4, got {n}")
    if n_t < 3:
        raise ValueError(f"n_t must be at least 3, got {n_t}")
    if not t_final > 0:
        raise ValueError(f"t_final must be positive, got {t_final}")
    return Grid(d=d, n=n, n_t=n_t, t_final=float(t_final))
