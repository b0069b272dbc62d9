"""Linearized operator, Bloch-Floquet fibers and stability certification.

The linearization of the Euler-Lagrange system at u = (nu_+, nu_-, V) acts on
perturbation triples (w_+, w_-, W) as the symmetric block operator

    [ -Lap + F_+    0          nu_+      ] [w_+]
    [  0           -Lap + F_-  nu_-      ] [w_-]
    [  nu_+         nu_-       Lap/(8pi) ] [W  ]

with zeroth-order multipliers F_pm = (35/9)|nu_pm|^{4/3} - (20/9)|nu_pm|^{2/3}
+ V + gauge -+ h.  For a cell-periodic base state the operator decomposes into
fibers over the Brillouin zone: -Lap is replaced by (-i grad + xi)^2 acting on
cell-periodic functions.  The distance of the spectrum to zero over all fibers
is the stability margin M^{-1}.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.sparse.linalg import LinearOperator, lobpcg

from .errors import EigensolverError, StructuralError
from .grids import Grid, ScalarField, State, as_h_values
from .fieldio import atomic_write_text

EIGHT_PI = 8.0 * np.pi
DENSE_CUTOFF = 5000  # assemble and diagonalize densely below this many unknowns
SDW_CHANNEL_CUTOFF = 0.9


def coefficient_fields(state: State, h=0.0):
    """Zeroth-order multipliers F_+ and F_- of the linearization."""
    grid = state.grid
    hv = as_h_values(h, grid)
    veff = state.v_full_values()
    out = []
    for nu, sign in ((state.nu_plus.values, -1.0), (state.nu_minus.values, +1.0)):
        out.append(
            (35.0 / 9.0) * np.abs(nu) ** (4.0 / 3.0)
            - (20.0 / 9.0) * np.abs(nu) ** (2.0 / 3.0)
            + veff
            + sign * hv
        )
    return out[0], out[1]


class LinearizedOperator:
    """Applies the symmetric linearization at a fixed base state."""

    def __init__(self, state: State, h=0.0):
        self.grid = state.grid
        self.base_state = state
        self.h = h
        self.F_plus, self.F_minus = coefficient_fields(state, h)
        self.nu_plus = state.nu_plus.values
        self.nu_minus = state.nu_minus.values

    @property
    def n_points(self):
        return self.grid.total_points

    @property
    def n_dof(self):
        return 3 * self.grid.total_points

    def apply(self, triple):
        w_plus, w_minus, w_v = triple
        g = self.grid
        out_plus = -g.laplacian(w_plus) + self.F_plus * w_plus + self.nu_plus * w_v
        out_minus = -g.laplacian(w_minus) + self.F_minus * w_minus + self.nu_minus * w_v
        out_v = (
            self.nu_plus * w_plus
            + self.nu_minus * w_minus
            + g.laplacian(w_v) / EIGHT_PI
        )
        return out_plus, out_minus, out_v

    def matvec(self, x):
        x = np.asarray(x).ravel()
        N = self.n_points
        shape = self.grid.shape
        triple = (
            x[:N].reshape(shape),
            x[N : 2 * N].reshape(shape),
            x[2 * N :].reshape(shape),
        )
        a, b, c = self.apply(triple)
        return np.concatenate([a.ravel(), b.ravel(), c.ravel()])

    def as_linear_operator(self):
        return LinearOperator((self.n_dof, self.n_dof), matvec=self.matvec, dtype=float)

    def preconditioner(self, squared=False):
        """SPD inverse-Helmholtz block preconditioner as a LinearOperator.

        Diagonal symbols (1 + |k|^2)^{-1} on the density channels and
        8 pi (1 + |k|^2)^{-1} on the potential channel, applied twice when
        preconditioning the squared operator.
        """
        g = self.grid
        N = self.n_points
        sym = 1.0 / (1.0 + g.k_sq)
        power = 2 if squared else 1
        sym_nu = sym**power
        sym_v = (EIGHT_PI * sym) ** power

        def mv(x):
            x = np.asarray(x).ravel()
            out = np.empty_like(x)
            out[:N] = g.spectral_multiply(x[:N].reshape(g.shape), sym_nu).ravel()
            out[N : 2 * N] = g.spectral_multiply(
                x[N : 2 * N].reshape(g.shape), sym_nu
            ).ravel()
            out[2 * N :] = g.spectral_multiply(x[2 * N :].reshape(g.shape), sym_v).ravel()
            return out

        return LinearOperator((self.n_dof, self.n_dof), matvec=mv, dtype=float)

    def dense_matrix(self):
        """Real symmetric matrix of the operator on its own grid."""
        T = _dense_kinetic(self.grid, None)
        N = self.n_points
        H = np.zeros((3 * N, 3 * N))
        H[:N, :N] = T + np.diag(self.F_plus.ravel())
        H[N : 2 * N, N : 2 * N] = T + np.diag(self.F_minus.ravel())
        H[2 * N :, 2 * N :] = -T / EIGHT_PI
        dp = np.diag(self.nu_plus.ravel())
        dm = np.diag(self.nu_minus.ravel())
        H[:N, 2 * N :] = dp
        H[2 * N :, :N] = dp
        H[N : 2 * N, 2 * N :] = dm
        H[2 * N :, N : 2 * N] = dm
        return H


def _dense_dft(grid: Grid):
    """Unitary DFT matrix U[k, x] = exp(-i k . x) / sqrt(N)."""
    key = "dft"
    if key not in grid._dense_cache:
        N = grid.total_points
        eye = np.eye(N).reshape((N,) + grid.shape)
        F = np.fft.fftn(eye, axes=(1, 2, 3)).reshape(N, N)
        grid._dense_cache[key] = F.T / np.sqrt(N)
    return grid._dense_cache[key]


def _dense_kinetic(grid: Grid, xi):
    """Dense matrix of (-i grad + xi)^2; xi = None means the plain -Lap
    (real symmetric)."""
    if xi is None:
        key = "kin0"
        if key not in grid._dense_cache:
            U = _dense_dft(grid)
            q = grid.k_sq.ravel()
            T = (U.conj().T * q) @ U
            T = np.real(T)
            grid._dense_cache[key] = 0.5 * (T + T.T)
        return grid._dense_cache[key]
    U = _dense_dft(grid)
    q = sum((grid.k_cart[a] + xi[a]) ** 2 for a in range(3)).ravel()
    T = (U.conj().T * q) @ U
    return 0.5 * (T + T.conj().T)


def wrap_to_zone(grid_or_lattice, xi):
    """Shift xi by a reciprocal lattice vector into the first zone
    (fractional coordinates in [-1/2, 1/2))."""
    lattice = getattr(grid_or_lattice, "lattice", grid_or_lattice)
    B = lattice.reciprocal_vectors
    t = np.linalg.solve(B.T, np.asarray(xi, dtype=float))
    t -= np.floor(t + 0.5)
    return B.T @ t


class FiberOperator:
    """Dense Bloch fiber of a cell-periodic linearized operator.

    ``wrap=False`` keeps the given quasimomentum as-is; needed when xi must
    match the mode window of a containing supercell exactly (see
    commensurate_xis).
    """

    def __init__(self, op: LinearizedOperator, xi, wrap=True):
        if not op.grid.is_cell:
            raise StructuralError("fibers require a cell-periodic base state")
        self.grid = op.grid
        self.xi = wrap_to_zone(self.grid, xi) if wrap else np.asarray(xi, dtype=float)
        N = op.n_points
        T = _dense_kinetic(self.grid, self.xi)
        H = np.zeros((3 * N, 3 * N), dtype=complex)
        H[:N, :N] = T + np.diag(op.F_plus.ravel())
        H[N : 2 * N, N : 2 * N] = T + np.diag(op.F_minus.ravel())
        H[2 * N :, 2 * N :] = -T / EIGHT_PI
        dp = np.diag(op.nu_plus.ravel().astype(complex))
        dm = np.diag(op.nu_minus.ravel().astype(complex))
        H[:N, 2 * N :] = dp
        H[2 * N :, :N] = dp
        H[N : 2 * N, 2 * N :] = dm
        H[2 * N :, N : 2 * N] = dm
        self.matrix = H
        self._eigvals = None

    def eigenvalues(self):
        if self._eigvals is None:
            self._eigvals = np.linalg.eigvalsh(self.matrix)
        return self._eigvals

    def gap(self):
        return float(np.min(np.abs(self.eigenvalues())))

    def min_eigenpair(self):
        vals, vecs = np.linalg.eigh(self.matrix)
        self._eigvals = vals
        i = int(np.argmin(np.abs(vals)))
        return float(vals[i]), vecs[:, i]

    def analyze(self, n_points):
        """One eigensolve: (gap, signed eigenvalue, sdw, cdw characters)."""
        val, vec = self.min_eigenpair()
        sdw, cdw = channel_characters(vec, n_points)
        return abs(val), val, sdw, cdw


def fiber(op: LinearizedOperator, xi, wrap=True) -> FiberOperator:
    return FiberOperator(op, xi, wrap)


def channel_characters(vec, n_points):
    """Spin-wave character of an eigenvector: fraction of weight in the
    antisymmetric (1,-1,0) channel versus the symmetric (1,1,.) channel."""
    vp = vec[:n_points]
    vm = vec[n_points : 2 * n_points]
    vw = vec[2 * n_points :]
    nrm = np.linalg.norm(vec)
    sdw = np.linalg.norm(vp - vm) / np.sqrt(2.0) / nrm
    cdw = np.sqrt(np.linalg.norm(vp + vm) ** 2 / 2.0 + np.linalg.norm(vw) ** 2) / nrm
    return float(sdw), float(cdw)


def classify_character(sdw, cdw, cutoff=SDW_CHANNEL_CUTOFF):
    if sdw > cutoff:
        return "sdw"
    if cdw > cutoff:
        return "cdw"
    return "mixed"


def spectral_gap(op, tol=1e-8, seed=0, maxiter=400, dense_cutoff=DENSE_CUTOFF):
    """Distance of the spectrum to zero.

    For FiberOperator (and any operator small enough to assemble densely) the
    answer comes from a dense symmetric eigensolve.  Larger operators use a
    seeded LOBPCG iteration on the squared operator with an inverse-Helmholtz
    preconditioner: the operator is indefinite, so the smallest eigenvalue of
    L^2 is the right target, not the smallest eigenvalue of L.
    """
    if isinstance(op, FiberOperator):
        return op.gap()
    if isinstance(op, np.ndarray):
        return float(np.min(np.abs(np.linalg.eigvalsh(op))))
    if op.n_dof <= dense_cutoff:
        return float(np.min(np.abs(np.linalg.eigvalsh(op.dense_matrix()))))

    A = op.as_linear_operator()

    def mv(x):
        return A @ (A @ x)

    A2 = LinearOperator((op.n_dof, op.n_dof), matvec=mv, dtype=float)
    M = op.preconditioner(squared=True)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((op.n_dof, 2))
    vals, vecs, hist = lobpcg(
        A2,
        X,
        M=M,
        tol=tol,
        maxiter=maxiter,
        largest=False,
        retResidualNormsHistory=True,
    )
    i = int(np.argmin(vals))
    lam = float(vals[i])
    v = vecs[:, i]
    true_res = float(np.linalg.norm(A2 @ v - lam * v))
    if true_res > max(100 * tol * abs(lam), 1e-11):
        raise EigensolverError(
            f"LOBPCG did not reach tolerance {tol} after {maxiter} iterations "
            f"(eigenpair residual {true_res:.3e})",
            residual_history=[float(h[0]) for h in hist],
        )
    return float(np.sqrt(max(lam, 0.0)))


@dataclass
class FiberRecord:
    xi: tuple[float, float, float]
    gap: float
    eigenvalue: float
    sdw: float
    cdw: float

    @property
    def character(self):
        return classify_character(self.sdw, self.cdw)


@dataclass
class StabilityReport:
    """Per-fiber gaps, the global margin and the instability class."""

    fiber_records: list[FiberRecord]
    global_gap: float
    M: float
    classification: str
    threshold: float
    refined_xi: tuple[float, float, float] | None = None
    refined_gap: float | None = None

    @property
    def fiber_gaps(self):
        return [(r.xi, r.gap) for r in self.fiber_records]

    def to_json(self):
        return json.dumps(
            {
                "global_gap": self.global_gap,
                "M": self.M,
                "classification": self.classification,
                "threshold": self.threshold,
                "refined_xi": list(self.refined_xi) if self.refined_xi else None,
                "refined_gap": self.refined_gap,
                "fibers": [
                    {
                        "xi": list(r.xi),
                        "gap": r.gap,
                        "eigenvalue": r.eigenvalue,
                        "sdw": r.sdw,
                        "cdw": r.cdw,
                        "class": r.character,
                    }
                    for r in self.fiber_records
                ],
            },
            indent=2,
            sort_keys=True,
        )

    def fibers_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["xi1", "xi2", "xi3", "gap", "class"])
        for r in self.fiber_records:
            writer.writerow(
                [f"{r.xi[0]:.17g}", f"{r.xi[1]:.17g}", f"{r.xi[2]:.17g}", f"{r.gap:.17g}", r.character]
            )
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write_text(path, self.fibers_csv())


def monkhorst_pack(lattice, q):
    """Uniform q1 x q2 x q3 sampling of the Brillouin zone (Gamma included)."""
    B = lattice.reciprocal_vectors
    pts = []
    for r1 in range(q[0]):
        for r2 in range(q[1]):
            for r3 in range(q[2]):
                frac = np.array(
                    [
                        (2 * r1 - q[0] + 1) / (2 * q[0]),
                        (2 * r2 - q[1] + 1) / (2 * q[1]),
                        (2 * r3 - q[2] + 1) / (2 * q[2]),
                    ]
                )
                pts.append(B.T @ frac)
    pts.append(np.zeros(3))
    uniq = []
    for p in pts:
        if not any(np.allclose(p, u, atol=1e-12) for u in uniq):
            uniq.append(p)
    return uniq


def commensurate_xis(lattice, supercell):
    """The quasimomenta whose cell fibers block-diagonalize the supercell
    operator: xi = sum_j (m_j / n_j) b_j with m_j in 0..n_j-1.

    The fractions are deliberately left in [0, 1): with the fftfreq mode
    windows of even grids this unwrapped convention makes the union of fiber
    mode sets coincide with the supercell's mode set exactly, so the
    decomposition is exact linear algebra (use fibers with wrap=False)."""
    B = lattice.reciprocal_vectors
    out = []
    for m1 in range(supercell[0]):
        for m2 in range(supercell[1]):
            for m3 in range(supercell[2]):
                frac = np.array([m1 / supercell[0], m2 / supercell[1], m3 / supercell[2]])
                out.append(B.T @ frac)
    return out


def stability_scan(
    state: State,
    h=0.0,
    xi_grid=None,
    threshold=1e-6,
    refine=True,
    refine_maxiter=200,
    character_cutoff=SDW_CHANNEL_CUTOFF,
    threads=1,
) -> StabilityReport:
    """Scan fibers over the zone, optionally refining the minimal gap by a
    local search (catches eigenvalue branches crossing zero between samples),
    and classify an instability by the eigenvector character at the minimum.

    Fibers are independent; with ``threads > 1`` they are solved on a pool
    and merged back in xi order.
    """
    grid = state.grid
    if not grid.is_cell:
        raise StructuralError("stability_scan needs a cell-periodic state")
    op = LinearizedOperator(state, h)
    N = op.n_points
    if xi_grid is None:
        xi_grid = monkhorst_pack(grid.lattice, (2, 2, 2))

    def analyze_one(xi):
        f = FiberOperator(op, xi)
        gap, val, sdw, cdw = f.analyze(N)
        return FiberRecord(tuple(np.asarray(f.xi, dtype=float)), gap, val, sdw, cdw)

    if threads > 1 and len(xi_grid) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(analyze_one, xi_grid))
    else:
        records = [analyze_one(xi) for xi in xi_grid]

    gaps = [r.gap for r in records]
    i_min = int(np.argmin(gaps))
    global_gap = records[i_min].gap
    min_record = records[i_min]
    refined_xi = None
    refined_gap = None

    if refine:
        B = grid.lattice.reciprocal_vectors

        def objective(t):
            return FiberOperator(op, B.T @ t).gap()

        t0 = np.linalg.solve(B.T, np.asarray(min_record.xi))
        result = minimize(
            objective,
            t0,
            method="Nelder-Mead",
            options={
                "maxiter": refine_maxiter,
                "xatol": 1e-9,
                "fatol": 1e-12,
                "disp": False,
            },
        )
        if result.fun < global_gap:
            refined_xi = tuple(wrap_to_zone(grid, B.T @ result.x))
            refined_gap = float(result.fun)
            global_gap = refined_gap
            _, val, sdw, cdw = FiberOperator(op, refined_xi).analyze(N)
            min_record = FiberRecord(refined_xi, refined_gap, val, sdw, cdw)

    if global_gap >= threshold:
        classification = "stable"
    else:
        tags = {
            classify_character(r.sdw, r.cdw, character_cutoff)
            for r in records + [min_record]
            if r.gap < threshold
        }
        if tags >= {"sdw", "cdw"}:
            classification = "both"
        elif "sdw" in tags:
            classification = "sdw_unstable"
        elif "cdw" in tags:
            classification = "cdw_unstable"
        else:
            # no dominant channel at the cutoff: fall back to the larger one
            classification = (
                "sdw_unstable" if min_record.sdw >= min_record.cdw else "cdw_unstable"
            )

    global_gap = max(global_gap, 1e-300)
    return StabilityReport(
        fiber_records=records,
        global_gap=global_gap,
        M=1.0 / global_gap,
        classification=classification,
        threshold=threshold,
        refined_xi=refined_xi,
        refined_gap=refined_gap,
    )
