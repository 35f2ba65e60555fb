"""Space-time field containers and pointwise symmetric-matrix algebra.

Scalar, vector and symmetric-matrix fields share a :class:`~dualflow.grid.Grid`
and store 64-bit values time-major, component axis (if any) before the spatial
axes.  Symmetric matrices keep only their d*(d+1)//2 distinct entries, so the
storage cannot represent an asymmetric matrix; all inner products on them are
Frobenius ones (off-diagonal entries count twice).

The eigenvalue and SPD-solve routines are closed-form (two-by-two directly,
trigonometric Cardano for three-by-three) and vectorized over grid nodes:
they run at every node on every line-search step, so determinism and speed
matter more than generality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import SYM_PAIRS, SYM_WEIGHTS, Grid, sym_slot

__all__ = [
    "NotPositiveDefinite",
    "ScalarField",
    "VectorField",
    "SymMatrixField",
    "DualState",
    "PrimalState",
    "sym_eigenvalues",
    "spd_solve",
    "spatial_gradient",
    "divergence",
    "sym_gradient",
    "sym_divergence",
    "time_derivative",
    "inverse_laplacian",
    "leray_project",
    "integrate_spacetime",
    "inner",
    "norm",
]

VARIANTS = ("euler", "ns", "ns_pressure")


class NotPositiveDefinite(RuntimeError):
    """Raised when a Cholesky pivot of a supposedly SPD matrix is non-positive."""

    def __init__(self, pivot: float, location=None):
        self.pivot = pivot
        self.location = location
        super().__init__(f"matrix not positive definite (pivot {pivot:.3e} at {location})")


# ----------------------------------------------------------------------
# containers


@dataclass
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.scalar_shape:
            raise ValueError(
                f"scalar field shape {self.values.shape} != {self.grid.scalar_shape}"
            )

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.scalar_shape))

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


@dataclass
class VectorField:
    grid: Grid
    values: np.ndarray  # (n_t, d, *spatial)

    def __post_init__(self):
        if self.values.shape != self.grid.vector_shape:
            raise ValueError(
                f"vector field shape {self.values.shape} != {self.grid.vector_shape}"
            )

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid, np.zeros(grid.vector_shape))

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.values.copy())


@dataclass
class SymMatrixField:
    grid: Grid
    values: np.ndarray  # (n_t, d*(d+1)//2, *spatial)

    def __post_init__(self):
        if self.values.shape != self.grid.sym_shape:
            raise ValueError(
                f"sym field shape {self.values.shape} != {self.grid.sym_shape}"
            )

    @classmethod
    def zeros(cls, grid: Grid) -> "SymMatrixField":
        return cls(grid, np.zeros(grid.sym_shape))

    def copy(self) -> "SymMatrixField":
        return SymMatrixField(self.grid, self.values.copy())

    def trace(self) -> np.ndarray:
        d = self.grid.d
        return sum(self.values[:, sym_slot(d, i, i)] for i in range(d))

    def frobenius_sq(self) -> np.ndarray:
        """Pointwise squared Frobenius norm, shape (n_t, *spatial)."""
        w = SYM_WEIGHTS[self.grid.d]
        return sum(w[s] * self.values[:, s] ** 2 for s in range(self.grid.n_sym))


def sym_outer(grid: Grid, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Symmetrized outer product of two vector-valued arrays (..., d, *s)."""
    comps = []
    for i, j in SYM_PAIRS[grid.d]:
        comps.append(0.5 * (u[:, i] * v[:, j] + u[:, j] * v[:, i]))
    return np.stack(comps, axis=1)


def sym_vec_contract(grid: Grid, sym_vals: np.ndarray, vec_vals: np.ndarray) -> np.ndarray:
    """Contraction (A v)_i = A_ij v_j for symmetric storage, batched."""
    d = grid.d
    comps = []
    for i in range(d):
        comps.append(
            sum(sym_vals[:, sym_slot(d, i, j)] * vec_vals[:, j] for j in range(d))
        )
    return np.stack(comps, axis=1)


def sym_frob_dot(grid: Grid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise Frobenius inner product of two symmetric-storage arrays."""
    w = SYM_WEIGHTS[grid.d]
    return sum(w[s] * a[:, s] * b[:, s] for s in range(grid.n_sym))


def vec_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise dot product of vector-valued arrays along the component axis."""
    return np.einsum("tc...,tc...->t...", a, b)


# ----------------------------------------------------------------------
# closed-form symmetric eigenvalues


def _eig2(n11, n12, n22):
    mid = 0.5 * (n11 + n22)
    rad = np.hypot(0.5 * (n11 - n22), n12)
    return mid - rad, mid + rad


def _eig3(a11, a12, a13, a22, a23, a33):
    # trigonometric solution of the characteristic cubic; ascending output
    q = (a11 + a22 + a33) / 3.0
    p2 = (a11 - q) ** 2 + (a22 - q) ** 2 + (a33 - q) ** 2 + 2.0 * (
        a12**2 + a13**2 + a23**2
    )
    p = np.sqrt(np.maximum(p2, 0.0) / 6.0)
    safe = np.where(p > 0.0, p, 1.0)
    b11, b22, b33 = (a11 - q) / safe, (a22 - q) / safe, (a33 - q) / safe
    b12, b13, b23 = a12 / safe, a13 / safe, a23 / safe
    detb = (
        b11 * (b22 * b33 - b23**2)
        - b12 * (b12 * b33 - b23 * b13)
        + b13 * (b12 * b23 - b22 * b13)
    )
    r = np.clip(detb / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    hi = q + 2.0 * p * np.cos(phi)
    lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    mid = 3.0 * q - hi - lo
    return lo, mid, hi


def _entries(vals: np.ndarray, d: int):
    return tuple(vals[:, s] for s in range(d * (d + 1) // 2))


def eig_range_sym(field_vals: np.ndarray, d: int):
    """Pointwise (min, max) eigenvalue arrays of a symmetric-storage field."""
    if d == 2:
        lo, hi = _eig2(*_entries(field_vals, 2))
    else:
        lo, _, hi = _eig3(*_entries(field_vals, 3))
    return lo, hi


def min_margin_values(a: float, strain_vals: np.ndarray, d: int) -> np.ndarray:
    """Smallest eigenvalue of a*Id + 2*strain at every node."""
    if d == 2:
        b11, b12, b22 = _entries(strain_vals, 2)
        lo, _ = _eig2(a + 2.0 * b11, 2.0 * b12, a + 2.0 * b22)
    else:
        b11, b12, b13, b22, b23, b33 = _entries(strain_vals, 3)
        lo, _, _ = _eig3(
            a + 2.0 * b11, 2.0 * b12, 2.0 * b13, a + 2.0 * b22, 2.0 * b23, a + 2.0 * b33
        )
    return lo

def sym_eigenvalues(mat) -> np.ndarray:
    """Ascending eigenvalues of one symmetric d x d matrix (d in {2, 3})."""
    m = np.asarray(mat, dtype=float)
    if m.shape == (2, 2):
        lo, hi = _eig2(m[0, 0], 0.5 * (m[0, 1] + m[1, 0]), m[1, 1])
        return np.array([lo, hi])
    if m.shape == (3, 3):
        lo, mid, hi = _eig3(
            m[0, 0],
            0.5 * (m[0, 1] + m[1, 0]),
            0.5 * (m[0, 2] + m[2, 0]),
            m[1, 1],
            0.5 * (m[1, 2] + m[2, 1]),
            m[2, 2],
        )
        return np.array([lo, mid, hi])
    raise ValueError(f"expected 2x2 or 3x3 matrix, got shape {m.shape}")


# ----------------------------------------------------------------------
# vectorized SPD solves (Cholesky, hand-rolled for d <= 3)


def _check_pivot(p: np.ndarray, what: str):
    pmin = p.min()
    if pmin <= 0.0:
        loc = np.unravel_index(int(np.argmin(p)), p.shape)
        raise NotPositiveDefinite(float(pmin), loc)


def spd_solve_sym(sym_entries, rhs: np.ndarray, d: int) -> np.ndarray:
    """Solve N x = rhs at every node for symmetric-storage entries of N.

    ``sym_entries`` is a tuple of arrays (one per stored entry), ``rhs`` has a
    component axis at position 1.  Raises NotPositiveDefinite on a bad pivot.
    """
    if d == 2:
        n11, n12, n22 = sym_entries
        _check_pivot(n11, "pivot 1")
        l11 = np.sqrt(n11)
        l21 = n12 / l11
        p2 = n22 - l21**2
        _check_pivot(p2, "pivot 2")
        l22 = np.sqrt(p2)
        z1 = rhs[:, 0] / l11
        z2 = (rhs[:, 1] - l21 * z1) / l22
        x2 = z2 / l22
        x1 = (z1 - l21 * x2) / l11
        return np.stack([x1, x2], axis=1)
    n11, n12, n13, n22, n23, n33 = sym_entries
    _check_pivot(n11, "pivot 1")
    l11 = np.sqrt(n11)
    l21 = n12 / l11
    l31 = n13 / l11
    p2 = n22 - l21**2
    _check_pivot(p2, "pivot 2")
    l22 = np.sqrt(p2)
    l32 = (n23 - l31 * l21) / l22
    p3 = n33 - l31**2 - l32**2
    _check_pivot(p3, "pivot 3")
    l33 = np.sqrt(p3)
    z1 = rhs[:, 0] / l11
    z2 = (rhs[:, 1] - l21 * z1) / l22
    z3 = (rhs[:, 2] - l31 * z1 - l32 * z2) / l33
    x3 = z3 / l33
    x2 = (z2 - l32 * x3) / l22
    x1 = (z1 - l21 * x2 - l31 * x3) / l11
    return np.stack([x1, x2, x3], axis=1)


def apply_inverse_shifted(a: float, strain_vals: np.ndarray, rhs: np.ndarray, d: int) -> np.ndarray:
    """Solve (a*Id + 2*strain) x = rhs at every node."""
    pairs = SYM_PAIRS[d]
    entries = tuple(
        (a if i == j else 0.0) + 2.0 * strain_vals[:, s] for s, (i, j) in enumerate(pairs)
    )
    return spd_solve_sym(entries, rhs, d)


def spd_solve(mat, rhs) -> np.ndarray:
    """Solve one SPD d x d system by Cholesky (d in {2, 3})."""
    m = np.asarray(mat, dtype=float)
    r = np.asarray(rhs, dtype=float)
    d = m.shape[0]
    if m.shape not in ((2, 2), (3, 3)) or r.shape != (d,):
        raise ValueError(f"bad shapes {m.shape}, {r.shape}")
    entries = tuple(
        np.array([0.5 * (m[i, j] + m[j, i])]) for i, j in SYM_PAIRS[d]
    )
    out = spd_solve_sym(entries, r.reshape(1, d), d)
    return out[0]


# ----------------------------------------------------------------------
# field-level operators


def spatial_gradient(f: ScalarField) -> VectorField:
    """Spectral gradient of a scalar field, per time slice."""
    return VectorField(f.grid, f.grid.grad(f.values))


def divergence(u: VectorField) -> ScalarField:
    return ScalarField(u.grid, u.grid.div(u.values))


def sym_gradient(u: VectorField) -> SymMatrixField:
    """Symmetrized spectral gradient 0.5*(grad u + grad u^T)."""
    return SymMatrixField(u.grid, u.grid.sym_grad(u.values))


def sym_divergence(chi: SymMatrixField) -> VectorField:
    return VectorField(chi.grid, chi.grid.div_sym(chi.values))


def time_derivative(fld, terminal_zero: bool = False):
    """Second-order finite-difference time derivative of any field type."""
    return type(fld)(fld.grid, fld.grid.time_derivative(fld.values, terminal_zero))


def inverse_laplacian(f: ScalarField) -> ScalarField:
    """Zero-mean spectral solution of the Poisson problem, per time slice."""
    return ScalarField(f.grid, f.grid.inv_laplacian(f.values))


def leray_project(u: VectorField) -> VectorField:
    """Orthogonal projection onto divergence-free fields, per time slice."""
    return VectorField(u.grid, u.grid.leray(u.values))


def integrate_spacetime(f: ScalarField) -> float:
    """Trapezoid-in-time, exact-in-space integral over [0,T] x torus."""
    return f.grid.integrate(f.values)


def _pointwise_inner(f1, f2) -> np.ndarray:
    if isinstance(f1, ScalarField):
        return f1.values * f2.values
    if isinstance(f1, VectorField):
        return vec_dot(f1.values, f2.values)
    return sym_frob_dot(f1.grid, f1.values, f2.values)


def inner(f1, f2) -> float:
    """Discrete space-time L2 inner product (Frobenius for matrix fields)."""
    return f1.grid.integrate(_pointwise_inner(f1, f2))


def norm(f) -> float:
    return float(np.sqrt(max(inner(f, f), 0.0)))


# ----------------------------------------------------------------------
# dual and primal states


@dataclass
class DualState:
    """Dual unknowns: lam (vector), gamma (scalar), chi (symmetric, NS only).

    Variants: ``euler`` (no chi; lam divergence-free, lam(T) = 0), ``ns``
    (chi present, same lam constraints), ``ns_pressure`` (chi present, lam
    only constrained by lam(T) = 0).
    """

    lam: VectorField
    gamma: ScalarField
    chi: SymMatrixField | None
    variant: str

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "euler" and self.chi is not None:
            raise ValueError("euler variant carries no chi field")
        if self.variant != "euler" and self.chi is None:
            raise ValueError(f"variant {self.variant!r} requires a chi field")

    @property
    def grid(self) -> Grid:
        return self.lam.grid

    @classmethod
    def zeros(cls, grid: Grid, variant: str) -> "DualState":
        chi = None if variant == "euler" else SymMatrixField.zeros(grid)
        return cls(VectorField.zeros(grid), ScalarField.zeros(grid), chi, variant)

    def copy(self) -> "DualState":
        return DualState(
            self.lam.copy(),
            self.gamma.copy(),
            None if self.chi is None else self.chi.copy(),
            self.variant,
        )

    def scale(self, c: float) -> "DualState":
        return DualState(
            VectorField(self.grid, c * self.lam.values),
            ScalarField(self.grid, c * self.gamma.values),
            None if self.chi is None else SymMatrixField(self.grid, c * self.chi.values),
            self.variant,
        )

    def add_scaled(self, other: "DualState", c: float) -> "DualState":
        chi = None
        if self.chi is not None:
            chi = SymMatrixField(self.grid, self.chi.values + c * other.chi.values)
        return DualState(
            VectorField(self.grid, self.lam.values + c * other.lam.values),
            ScalarField(self.grid, self.gamma.values + c * other.gamma.values),
            chi,
            self.variant,
        )

    def inner(self, other: "DualState") -> float:
        total = inner(self.lam, other.lam) + inner(self.gamma, other.gamma)
        if self.chi is not None:
            total += inner(self.chi, other.chi)
        return total

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def project(self) -> "DualState":
        """Enforce the variant's structural constraints.

        All variants: lam(T) = 0 and gamma of zero spatial mean per slice.
        euler/ns additionally Leray-project lam slice by slice.
        """
        grid = self.grid
        lam = self.lam.values.copy()
        lam[-1] = 0.0
        if self.variant in ("euler", "ns"):
            lam = grid.leray(lam)
            lam[-1] = 0.0
        gam = self.gamma.values - grid.spatial_mean(self.gamma.values).reshape(
            (grid.n_t,) + (1,) * grid.d
        )
        chi = None if self.chi is None else self.chi.copy()
        return DualState(VectorField(grid, lam), ScalarField(grid, gam), chi, self.variant)


@dataclass
class PrimalState:
    """Recovered primal fields with residual diagnostics.

    Divergence of ``v`` is a diagnostic, not an invariant.  ``dual`` keeps a
    reference to the dual state the recovery came from so residual reports
    can be recomputed without re-optimizing.
    """

    v: VectorField
    w: SymMatrixField | None = None
    p: ScalarField | None = None
    diagnostics: dict = field(default_factory=dict)
    dual: DualState | None = None
