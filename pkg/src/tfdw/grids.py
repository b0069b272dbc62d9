"""Lattices, periodic collocation grids, spectral transforms and norms.

Conventions used throughout the package:

* A Bravais lattice is given by three row vectors ``a_i`` (``cell_vectors``);
  the reciprocal rows ``b_j`` satisfy ``a_i . b_j = 2 pi delta_ij``.
* Fields are sampled on a uniform collocation grid over the supercell
  ``n Gamma`` with ``M_i = resolution_i * supercell_i`` points per axis.
* Fourier coefficients follow the continuum normalization
  ``fhat(k) = (2 pi)^{-3/2} \\int_{n Gamma} f(x) exp(-i k x) dx``,
  approximated by the trapezoid/DFT quadrature (exact for band-limited f).
* Volume-averaged norms carry the ``1/(n1 n2 n3)`` prefactor, so constants
  and per-cell content measure the same on every supercell.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, SolvabilityError, StructuralError

TWO_PI = 2.0 * np.pi
FOURIER_PREFACTOR = (2.0 * np.pi) ** (-1.5)


@dataclass(frozen=True)
class Mode:
    """One real Fourier mode ``amp * cos(2 pi m . frac + phase)`` of a
    lattice-periodic function, indexed by an integer triple ``m``."""

    m: tuple[int, int, int]
    amp: float
    phase: float = 0.0

    def __post_init__(self):
        if len(self.m) != 3 or any(int(c) != c for c in self.m):
            raise StructuralError(f"mode index must be an integer triple, got {self.m}")
        object.__setattr__(self, "m", tuple(int(c) for c in self.m))


class LatticeSpec:
    """Unit cell, electron count and smooth periodic background density.

    The background is ``rho_b(x) = Z/|Gamma| + sum_j amp_j cos(2 pi m_j . f(x)
    + phase_j)`` with ``f`` the cell-fractional coordinates, so its cell mean
    is pinned to ``Z/|Gamma|`` by construction and the normalization
    constraint is satisfiable.
    """

    def __init__(self, cell_vectors, Z, rho_b_modes=()):
        A = np.asarray(cell_vectors, dtype=float)
        if A.shape != (3, 3):
            raise StructuralError("cell_vectors must be a 3x3 matrix")
        det = float(np.linalg.det(A))
        if det <= 0.0:
            raise StructuralError(f"cell volume must be positive, got det = {det}")
        if not Z > 0:
            raise StructuralError("Z must be positive")
        self.cell_vectors = A
        self.Z = float(Z)
        modes = []
        for mode in rho_b_modes:
            if not isinstance(mode, Mode):
                mode = Mode(*mode)
            if mode.m == (0, 0, 0):
                raise StructuralError("rho_b modes must not touch the mean (m = 0); the mean is Z/|Gamma|")
            modes.append(mode)
        self.rho_b_modes = tuple(modes)

    @classmethod
    def cubic(cls, a, Z, rho_b_modes=()):
        return cls(np.eye(3) * float(a), Z, rho_b_modes)

    @property
    def volume(self):
        return float(np.linalg.det(self.cell_vectors))

    @property
    def reciprocal_vectors(self):
        """Rows b_j with a_i . b_j = 2 pi delta_ij."""
        return TWO_PI * np.linalg.inv(self.cell_vectors).T

    @property
    def rho_b_mean(self):
        return self.Z / self.volume

    def rho_b_values(self, grid):
        vals = np.full(grid.shape, self.rho_b_mean)
        for mode in self.rho_b_modes:
            phase = TWO_PI * sum(c * f for c, f in zip(mode.m, grid.cell_fraction))
            vals = vals + mode.amp * np.cos(phase + mode.phase)
        return vals

    def __eq__(self, other):
        return (
            isinstance(other, LatticeSpec)
            and np.array_equal(self.cell_vectors, other.cell_vectors)
            and self.Z == other.Z
            and self.rho_b_modes == other.rho_b_modes
        )

    def descriptor(self):
        return {
            "cell_vectors": self.cell_vectors.tolist(),
            "Z": self.Z,
            "rho_b_modes": [
                {"m": list(m.m), "amp": m.amp, "phase": m.phase} for m in self.rho_b_modes
            ],
        }

    @classmethod
    def from_descriptor(cls, d):
        modes = [Mode(tuple(x["m"]), x["amp"], x.get("phase", 0.0)) for x in d.get("rho_b_modes", [])]
        return cls(np.array(d["cell_vectors"]), d["Z"], modes)


@dataclass(frozen=True)
class GridSpec:
    """Collocation resolution per unit-cell axis and supercell factors."""

    resolution: tuple[int, int, int]
    supercell: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        sup = tuple(int(n) for n in self.supercell)
        if len(res) != 3 or any(r < 4 or r % 2 for r in res):
            raise StructuralError(f"resolution must be three even integers >= 4, got {res}")
        if len(sup) != 3 or any(n < 1 for n in sup):
            raise StructuralError(f"supercell factors must be positive integers, got {sup}")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "supercell", sup)

    @property
    def shape(self):
        return tuple(r * n for r, n in zip(self.resolution, self.supercell))

    @property
    def total_points(self):
        return int(np.prod(self.shape))


class Grid:
    """Compiled lattice + grid: points, wavevectors and spectral kernels.

    All operations are pure; the instance only caches immutable arrays, so a
    Grid may be shared freely across threads.
    """

    def __init__(self, lattice: LatticeSpec, spec: GridSpec):
        self.lattice = lattice
        self.spec = spec
        self.shape = spec.shape
        self.total_points = spec.total_points
        self.n_cells = int(np.prod(spec.supercell))
        self.vol_cell = lattice.volume
        self.vol_supercell = self.vol_cell * self.n_cells
        # quadrature weight of one collocation point
        self.w_quad = self.vol_supercell / self.total_points

        B = lattice.reciprocal_vectors
        kappa = [np.fft.fftfreq(M) * M for M in self.shape]  # integer mode indices
        frac = [kappa[j] / spec.supercell[j] for j in range(3)]  # reciprocal fractions in L*/n
        F = np.meshgrid(*frac, indexing="ij")
        self.k_cart = [sum(F[j] * B[j, a] for j in range(3)) for a in range(3)]
        self.k_sq = sum(k * k for k in self.k_cart)
        inv = np.zeros_like(self.k_sq)
        nz = self.k_sq > 0
        inv[nz] = 1.0 / self.k_sq[nz]
        self.inv_k_sq = inv
        # Nyquist planes per axis (unmatched mode on even grids); odd spectral
        # derivatives must kill them to stay skew-adjoint.
        self._nyquist = []
        for j, M in enumerate(self.shape):
            mask = kappa[j] == -(M // 2)
            shape = [1, 1, 1]
            shape[j] = M
            self._nyquist.append(mask.reshape(shape))

        idx = [np.arange(M) for M in self.shape]
        I = np.meshgrid(*idx, indexing="ij")
        # fractional coordinates within the unit cell (exact rationals)
        self.cell_fraction = [
            (I[j] % spec.resolution[j]) / spec.resolution[j] for j in range(3)
        ]
        # fractional coordinates across the whole supercell, in [0, 1)
        self.supercell_fraction = [I[j] / self.shape[j] for j in range(3)]
        self._dense_cache: dict = {}

    # -- identity ---------------------------------------------------------

    @property
    def is_cell(self):
        return self.spec.supercell == (1, 1, 1)

    @property
    def domain(self):
        return "cell" if self.is_cell else "supercell"

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.lattice == other.lattice
            and self.spec == other.spec
        )

    def cell_grid(self):
        """The unit-cell grid with the same per-cell resolution."""
        if self.is_cell:
            return self
        return Grid(self.lattice, GridSpec(self.spec.resolution, (1, 1, 1)))

    # -- transforms --------------------------------------------------------

    def fft(self, values):
        """Paper-normalized Fourier coefficients fhat(k) on L*/n."""
        return (FOURIER_PREFACTOR * self.w_quad) * np.fft.fftn(values)

    def ifft(self, coeffs):
        vals = np.fft.ifftn(coeffs) / (FOURIER_PREFACTOR * self.w_quad)
        return np.real(vals)

    def deriv(self, values, alpha):
        """Spectral partial derivative with multi-index ``alpha``."""
        if len(alpha) != 3 or any(a < 0 for a in alpha):
            raise StructuralError(f"bad multi-index {alpha}")
        if sum(alpha) == 0:
            return np.array(values, dtype=float)
        coeffs = np.fft.fftn(values)
        mult = np.ones(self.shape, dtype=complex)
        for j, a in enumerate(alpha):
            if a == 0:
                continue
            mult = mult * (1j * self.k_cart[j]) ** a
            if a % 2:
                mult = np.where(self._nyquist[j], 0.0, mult)
        return np.real(np.fft.ifftn(coeffs * mult))

    def gradient(self, values):
        return [self.deriv(values, tuple(int(j == a) for j in range(3))) for a in range(3)]

    def laplacian(self, values):
        coeffs = np.fft.fftn(values)
        return np.real(np.fft.ifftn(-self.k_sq * coeffs))

    def spectral_multiply(self, values, symbol):
        """ifft(symbol * fft(values)) for a real-symbol diagonal operator."""
        return np.real(np.fft.ifftn(symbol * np.fft.fftn(values)))

    def helmholtz_inverse(self, values, c=1.0):
        """(c - Laplacian)^{-1}, the standard smoothing preconditioner."""
        return self.spectral_multiply(values, 1.0 / (c + self.k_sq))

    def poisson(self, rhs, rel_tol=1e-10):
        """Unique mean-zero V with -Laplacian V = rhs, for mean-zero rhs."""
        m = self.mean(rhs)
        if abs(m) > rel_tol * max(self.l2n(rhs), 1e-300):
            raise SolvabilityError(
                "poisson right-hand side has nonzero mean: coefficient at k = (0,0,0) "
                f"is {m * self.vol_supercell:.3e} (mean {m:.3e}); the mean-zero "
                "compatibility condition fails"
            )
        coeffs = np.fft.fftn(rhs)
        coeffs = coeffs * self.inv_k_sq
        return np.real(np.fft.ifftn(coeffs))

    # -- quadrature and norms ----------------------------------------------

    def integrate(self, values):
        """Unscaled integral over the supercell."""
        return float(np.sum(values) * self.w_quad)

    def mean(self, values):
        return float(np.mean(values))

    def inner(self, f, g):
        """Plain L^2(n Gamma) inner product (unscaled)."""
        return float(np.sum(f * g) * self.w_quad)

    def lp_norm(self, values, p):
        if p == np.inf:
            return float(np.max(np.abs(values)))
        return float((self.integrate(np.abs(values) ** p) / self.n_cells) ** (1.0 / p))

    def l2n(self, values):
        """Volume-averaged L^2 norm ((1/n^3) \\int |f|^2)^{1/2}."""
        return float(np.sqrt(np.sum(values * values) * self.w_quad / self.n_cells))

    def l2n_inner(self, f, g):
        return float(np.sum(f * g) * self.w_quad / self.n_cells)

    def hk_norm(self, values, k):
        """Averaged Sobolev norm: sum of L^2_n norms of all derivatives
        of order <= k (the order-zero term included)."""
        total = 0.0
        coeffs = np.fft.fftn(values)
        for alpha in multi_indices(k):
            if sum(alpha) == 0:
                total += self.l2n(values)
                continue
            mult = np.ones(self.shape, dtype=complex)
            for j, a in enumerate(alpha):
                if a:
                    mult = mult * (1j * self.k_cart[j]) ** a
                    if a % 2:
                        mult = np.where(self._nyquist[j], 0.0, mult)
            total += self.l2n(np.real(np.fft.ifftn(coeffs * mult)))
        return float(total)

    def hminus1_inner(self, f, g, rel_tol=1e-10):
        """Homogeneous H^{-1} inner product: 4 pi sum'_k fhat* ghat / |k|^2."""
        fh = self.fft(f)
        gh = self.fft(g)
        for name, vals, coeffs in (("first", f, fh), ("second", g, gh)):
            if abs(coeffs.flat[0]) > rel_tol * max(
                self.l2n(vals) * FOURIER_PREFACTOR * self.vol_supercell, 1e-300
            ):
                raise SolvabilityError(
                    f"H^-1 pairing needs mean-zero fields: the {name} argument has "
                    f"coefficient {coeffs.flat[0]:.3e} at k = (0,0,0)"
                )
        return float(np.real(4.0 * np.pi * np.sum(np.conj(fh) * gh * self.inv_k_sq)))

    def hminus1_norm(self, values, rel_tol=1e-10):
        return float(np.sqrt(max(self.hminus1_inner(values, values, rel_tol), 0.0)))

    def coulomb_pairing(self, f, g):
        """D(f, g) = \\int V_f g with -Laplacian V_f = 4 pi f, computed
        spectrally.  This is the pairing that makes the Poisson equation the
        stationarity condition of (1/2) D(rho - rho_b, rho - rho_b); it equals
        the H^-1 inner product times (2 pi)^3 / |n Gamma| in the coefficient
        normalization used here."""
        fh = np.fft.fftn(f)
        gh = np.fft.fftn(g)
        s = np.real(np.sum(np.conj(fh) * gh * self.inv_k_sq))
        return float(4.0 * np.pi * s * self.w_quad / self.total_points)


def multi_indices(k):
    """All 3d multi-indices with |alpha| <= k, in a fixed deterministic order."""
    out = []
    for total in range(k + 1):
        for a1 in range(total + 1):
            for a2 in range(total - a1 + 1):
                out.append((a1, a2, total - a1 - a2))
    return out


# -- fields ----------------------------------------------------------------


@dataclass
class ScalarField:
    """Real periodic field sampled on a collocation grid.

    Values are stored row-major over the axes; fields are treated as
    immutable after construction (operations return new instances).
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise StructuralError(
                f"field values shape {vals.shape} does not match grid {self.grid.shape}"
            )
        self.values = vals

    @property
    def domain(self):
        return self.grid.domain

    def _check(self, other):
        if not isinstance(other, ScalarField):
            raise GridMismatchError("expected a ScalarField operand")
        if other.grid != self.grid:
            raise GridMismatchError("fields live on different grids")

    def __add__(self, other):
        if np.isscalar(other):
            return ScalarField(self.grid, self.values + other)
        self._check(other)
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other):
        if np.isscalar(other):
            return ScalarField(self.grid, self.values - other)
        self._check(other)
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, other):
        if np.isscalar(other):
            return ScalarField(self.grid, self.values * other)
        self._check(other)
        return ScalarField(self.grid, self.values * other.values)

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)


@dataclass
class SpectralField:
    """Fourier-side representation of a ScalarField (paper-normalized)."""

    grid: Grid
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != self.grid.shape:
            raise StructuralError("coefficient shape does not match grid")


def constant_field(grid, value):
    return ScalarField(grid, np.full(grid.shape, float(value)))


def transform(obj, direction):
    """Forward: ScalarField -> SpectralField with the continuum-normalized
    coefficients; inverse: exact discrete inverse back to values."""
    if direction == "forward":
        if not isinstance(obj, ScalarField):
            raise StructuralError("forward transform expects a ScalarField")
        if not np.all(np.isfinite(obj.values)):
            raise StructuralError("field values must be finite")
        return SpectralField(obj.grid, obj.grid.fft(obj.values))
    if direction == "inverse":
        if not isinstance(obj, SpectralField):
            raise StructuralError("inverse transform expects a SpectralField")
        return ScalarField(obj.grid, obj.grid.ifft(obj.coeffs))
    raise StructuralError(f"unknown transform direction {direction!r}")


def norm(fld: ScalarField, space, **kw):
    """Norm dispatch: ("Lp", p), ("Hk", k) or "Hminus1"."""
    if isinstance(space, tuple):
        kind, order = space
        if kind == "Lp":
            return fld.grid.lp_norm(fld.values, order)
        if kind == "Hk":
            return fld.grid.hk_norm(fld.values, order)
        raise StructuralError(f"unknown norm space {space!r}")
    if space == "L2":
        return fld.grid.l2n(fld.values)
    if space == "Hminus1":
        return fld.grid.hminus1_norm(fld.values, **kw)
    raise StructuralError(f"unknown norm space {space!r}")


def poisson_solve(rhs: ScalarField, rel_tol=1e-10):
    return ScalarField(rhs.grid, rhs.grid.poisson(rhs.values, rel_tol))


def derivative(fld: ScalarField, alpha):
    return ScalarField(fld.grid, fld.grid.deriv(fld.values, alpha))


def laplacian(fld: ScalarField):
    return ScalarField(fld.grid, fld.grid.laplacian(fld.values))


# -- states ------------------------------------------------------------------


@dataclass
class State:
    """Solver unknown: spin channels (nu_plus, nu_minus), the mean-zero
    Coulomb potential V and the additive gauge constant that carries the
    normalization multiplier (the effective potential is V + gauge)."""

    nu_plus: ScalarField
    nu_minus: ScalarField
    V: ScalarField
    gauge: float = 0.0

    def __post_init__(self):
        g = self.nu_plus.grid
        if self.nu_minus.grid != g or self.V.grid != g:
            raise GridMismatchError("state fields must share one grid")

    @property
    def grid(self):
        return self.nu_plus.grid

    def rho_values(self):
        return self.nu_plus.values**2 + self.nu_minus.values**2

    def m_values(self):
        return self.nu_plus.values**2 - self.nu_minus.values**2

    def v_full_values(self):
        return self.V.values + self.gauge

    def copy(self):
        g = self.grid
        return State(
            ScalarField(g, self.nu_plus.values.copy()),
            ScalarField(g, self.nu_minus.values.copy()),
            ScalarField(g, self.V.values.copy()),
            self.gauge,
        )


def state_from_arrays(grid, nu_plus, nu_minus, v_full):
    """Build a State from raw arrays, splitting the potential into its
    mean-zero part and the gauge constant."""
    gauge = float(np.mean(v_full))
    return State(
        ScalarField(grid, np.array(nu_plus, dtype=float)),
        ScalarField(grid, np.array(nu_minus, dtype=float)),
        ScalarField(grid, v_full - gauge),
        gauge,
    )


def translate(values, grid, cells):
    """Translate a field by an integer number of unit cells per axis
    (exact on the collocation grid)."""
    shift = [c * r for c, r in zip(cells, grid.spec.resolution)]
    return np.roll(values, shift, axis=(0, 1, 2))


def random_smooth_field(grid, rng, amplitude=1.0, kmax=2, supercell_modes=False):
    """Seeded band-limited random field: a few low cosine modes.

    With ``supercell_modes`` the mode indices address the supercell (period
    n Gamma); otherwise they are cell-periodic.
    """
    frac = grid.supercell_fraction if supercell_modes else grid.cell_fraction
    vals = np.zeros(grid.shape)
    for m in itertools.product(range(-kmax, kmax + 1), repeat=3):
        if m == (0, 0, 0):
            continue
        amp = amplitude * rng.normal() / (1.0 + sum(c * c for c in m))
        phase = rng.uniform(0.0, TWO_PI)
        vals += amp * np.cos(TWO_PI * sum(c * f for c, f in zip(m, frac)) + phase)
    return vals


# -- macroscopic applied field ----------------------------------------------


class HField:
    """Applied collinear field given on the slow (macroscopic) unit cell.

    ``h(y) = value + sum_j amp_j cos(2 pi m_j . f(y) + phase_j)`` where f are
    cell-fractional coordinates of the slow variable.  On a supercell with
    scale ratio eps the sampled field is ``h(eps x)``; slow-variable gradient
    and Hessian are available analytically, which the two-scale correctors
    need exactly.
    """

    def __init__(self, value=0.0, modes=()):
        self.value = float(value)
        self.modes = tuple(m if isinstance(m, Mode) else Mode(*m) for m in modes)

    @property
    def is_constant(self):
        return all(m.amp == 0.0 for m in self.modes)

    def max_abs(self):
        return abs(self.value) + sum(abs(m.amp) for m in self.modes)

    def check_compatible(self, grid, eps):
        """h(eps x) must be periodic on the supercell: eps * n_j * m_j integral."""
        for mode in self.modes:
            for j in range(3):
                t = eps * grid.spec.supercell[j] * mode.m[j]
                if abs(t - round(t)) > 1e-12:
                    raise StructuralError(
                        f"mode {mode.m} is not periodic on supercell "
                        f"{grid.spec.supercell} at eps = {eps}"
                    )

    def _slow_fraction(self, grid, eps):
        return [
            eps * grid.spec.supercell[j] * grid.supercell_fraction[j] for j in range(3)
        ]

    def sample(self, grid, eps):
        """ScalarField of h(eps x) on the supercell grid."""
        self.check_compatible(grid, eps)
        f = self._slow_fraction(grid, eps)
        vals = np.full(grid.shape, self.value)
        for mode in self.modes:
            vals = vals + mode.amp * np.cos(
                TWO_PI * sum(c * fj for c, fj in zip(mode.m, f)) + mode.phase
            )
        return ScalarField(grid, vals)

    def grad_slow(self, grid, eps):
        """Cartesian slow-variable gradient of h at y = eps x (3 arrays)."""
        self.check_compatible(grid, eps)
        f = self._slow_fraction(grid, eps)
        Ainv = np.linalg.inv(grid.lattice.cell_vectors)
        out = [np.zeros(grid.shape) for _ in range(3)]
        for mode in self.modes:
            phase = TWO_PI * sum(c * fj for c, fj in zip(mode.m, f)) + mode.phase
            mfrac = Ainv @ np.array(mode.m, dtype=float)
            s = -TWO_PI * mode.amp * np.sin(phase)
            for a in range(3):
                out[a] = out[a] + s * mfrac[a]
        return out

    def hess_slow(self, grid, eps):
        """Cartesian slow-variable Hessian of h (dict over ordered pairs)."""
        self.check_compatible(grid, eps)
        f = self._slow_fraction(grid, eps)
        Ainv = np.linalg.inv(grid.lattice.cell_vectors)
        out = {}
        for a in range(3):
            for b in range(3):
                out[(a, b)] = np.zeros(grid.shape)
        for mode in self.modes:
            phase = TWO_PI * sum(c * fj for c, fj in zip(mode.m, f)) + mode.phase
            mfrac = Ainv @ np.array(mode.m, dtype=float)
            c = -(TWO_PI**2) * mode.amp * np.cos(phase)
            for a in range(3):
                for b in range(3):
                    out[(a, b)] = out[(a, b)] + c * mfrac[a] * mfrac[b]
        return out

    def active_axes(self, grid, eps):
        """Axes along which h actually varies on this supercell."""
        axes = set()
        for mode in self.modes:
            if mode.amp == 0.0:
                continue
            mfrac = np.linalg.inv(grid.lattice.cell_vectors) @ np.array(mode.m, float)
            for a in range(3):
                if abs(mfrac[a]) > 1e-14:
                    axes.add(a)
        return sorted(axes)

    def descriptor(self):
        return {
            "value": self.value,
            "modes": [{"m": list(m.m), "amp": m.amp, "phase": m.phase} for m in self.modes],
        }

    @classmethod
    def from_descriptor(cls, d):
        if isinstance(d, (int, float)):
            return cls(value=float(d))
        modes = [Mode(tuple(x["m"]), x["amp"], x.get("phase", 0.0)) for x in d.get("modes", [])]
        return cls(d.get("value", 0.0), modes)


def as_h_values(h, grid, eps=None):
    """Accept a constant, a ScalarField or an HField as the applied field."""
    if h is None:
        return np.zeros(grid.shape)
    if np.isscalar(h):
        return np.full(grid.shape, float(h))
    if isinstance(h, ScalarField):
        if h.grid != grid:
            raise GridMismatchError("applied field lives on a different grid")
        return h.values
    if isinstance(h, HField):
        if eps is None:
            eps = 1.0 / max(grid.spec.supercell)
        return h.sample(grid, eps).values
    raise StructuralError(f"cannot interpret applied field of type {type(h)!r}")
