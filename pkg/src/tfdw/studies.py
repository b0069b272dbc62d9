"""Reproducible multi-run studies: sweeps, duality checks, stability-in-n.

Every number emitted here comes from a module operation; the only
study-level arithmetic is ordinary least squares on log-log data.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar

from . import cauchy_born as cb
from . import twoscale as ts
from .cells import SolveOptions, solve_cell
from .errors import StructuralError
from .fieldio import atomic_write_text
from .grids import Grid, GridSpec, HField, LatticeSpec, Mode, ScalarField, State
from .linop import stability_scan, wrap_to_zone
from .newton import NewtonOptions, newton_solve
from .residual import residual


def parallel_map(fn, items, threads=1):
    """Order-preserving map, optionally over a thread pool."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def fit_loglog_slope(xs, ys, drop_largest=True):
    """OLS slope of log(y) against log(x); by default the largest x
    (pre-asymptotic) point is excluded."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if drop_largest and len(xs) > 2:
        keep = xs < np.max(xs)
        xs, ys = xs[keep], ys[keep]
    if len(xs) < 2:
        raise StructuralError("slope fit needs at least two points")
    lx, ly = np.log(xs), np.log(ys)
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(coef[0])


@dataclass
class EpsStudyRow:
    n: int
    eps: float
    ansatz_residual: float
    newton_distance_u0: float
    cb_distance: float
    contraction_max: float
    ansatz_residual_first_order: float = float("nan")
    converged: bool = True


@dataclass
class EpsStudyResult:
    rows: list[EpsStudyRow]
    slopes: dict
    table: cb.CBTable | None = None

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["n", "eps", "ansatz_residual", "newton_distance_u0", "cb_distance", "contraction_max"]
        )
        for r in self.rows:
            writer.writerow(
                [
                    r.n,
                    f"{r.eps:.17g}",
                    f"{r.ansatz_residual:.17g}",
                    f"{r.newton_distance_u0:.17g}",
                    f"{r.cb_distance:.17g}",
                    f"{r.contraction_max:.17g}",
                ]
            )
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write_text(path, self.to_csv())

    def slopes_json(self):
        return json.dumps(self.slopes, indent=2, sort_keys=True)


def run_eps_study(
    lattice: LatticeSpec,
    resolution,
    h_field: HField,
    n_values,
    cb_range,
    cb_step,
    solve_opts: SolveOptions | None = None,
    newton_opts: NewtonOptions | None = None,
    verify_samples=True,
    with_first_order_comparison=True,
    drop_largest=True,
    threads=1,
    table: cb.CBTable | None = None,
) -> EpsStudyResult:
    """For each supercell factor n: build the two-scale state, measure its
    residual, run the frozen-Jacobian iteration and record distances."""
    solve_opts = solve_opts or SolveOptions()
    newton_opts = newton_opts or NewtonOptions()
    if table is None:
        table = cb.build_cb_table(
            lattice,
            GridSpec(tuple(resolution)),
            h_range=cb_range,
            step=cb_step,
            opts=solve_opts,
            verify_samples=verify_samples,
        )

    def run_one(n):
        grid_n = Grid(lattice, GridSpec(tuple(resolution), (n, 1, 1)))
        eps = 1.0 / n
        h_vals = h_field.sample(grid_n, eps)
        u0, cs = ts.build_u0(table, h_field, grid_n, eps)
        res_u0 = residual(u0, h_vals).norm_l2n()
        res_first = float("nan")
        if with_first_order_comparison:
            u0_first = ts.assemble_u0(cs, include_second=False)
            res_first = residual(u0_first, h_vals).norm_l2n()
        u_cb = cb.cb_field(table, h_vals, eps)
        u_star, trace = newton_solve(u0, h_vals, newton_opts, u_cb=u_cb)
        return EpsStudyRow(
            n=n,
            eps=eps,
            ansatz_residual=res_u0,
            newton_distance_u0=trace.distance_to_u0,
            cb_distance=trace.distance_to_cb,
            contraction_max=trace.contraction_max,
            ansatz_residual_first_order=res_first,
            converged=trace.converged,
        )

    rows = parallel_map(run_one, sorted(int(n) for n in n_values), threads)
    eps_v = [r.eps for r in rows]
    slopes = {
        "ansatz_residual": fit_loglog_slope(eps_v, [r.ansatz_residual for r in rows], drop_largest),
        "newton_distance_u0": fit_loglog_slope(
            eps_v, [r.newton_distance_u0 for r in rows], drop_largest
        ),
        "cb_distance": fit_loglog_slope(eps_v, [r.cb_distance for r in rows], drop_largest),
        "drop_largest": drop_largest,
    }
    if with_first_order_comparison:
        slopes["ansatz_residual_first_order"] = fit_loglog_slope(
            eps_v, [r.ansatz_residual_first_order for r in rows], drop_largest
        )
    return EpsStudyResult(rows=rows, slopes=slopes, table=table)


@dataclass
class LegendreRow:
    h: float
    E_CB: float
    legendre_value: float
    minimizing_m: float
    rel_err: float


def run_legendre_study(
    table: cb.CBTable,
    h_values,
    m_count=9,
    m_margin=0.85,
    solve_opts: SolveOptions | None = None,
):
    """Check the duality E_CB(h) = min_m ( dual_E(m) - h m / |Gamma| ) at
    interior field values, with the dual energies from independent
    constrained solves."""
    solve_opts = solve_opts or SolveOptions()
    lo, hi = table.m_range()
    m_values = np.linspace(m_margin * lo, m_margin * hi, m_count)
    duals = [
        cb.dual_energy(table.lattice, table.grid, m, opts=solve_opts, table=table)
        for m in m_values
    ]
    spline = CubicSpline(m_values, duals)
    vol = table.lattice.volume
    rows = []
    for h in h_values:
        res = minimize_scalar(
            lambda m: float(spline(m)) - h * m / vol,
            bounds=(float(m_values[0]), float(m_values[-1])),
            method="bounded",
            options={"xatol": 1e-12},
        )
        e_cb = table.energy_at(h)
        rel = abs(res.fun - e_cb) / max(abs(e_cb), 1e-300)
        rows.append(
            LegendreRow(
                h=float(h),
                E_CB=float(e_cb),
                legendre_value=float(res.fun),
                minimizing_m=float(res.x),
                rel_err=float(rel),
            )
        )
    return rows, (m_values, np.array(duals))


def legendre_rows_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["h", "E_CB", "legendre_value", "minimizing_m", "rel_err"])
    for r in rows:
        writer.writerow(
            [
                f"{r.h:.17g}",
                f"{r.E_CB:.17g}",
                f"{r.legendre_value:.17g}",
                f"{r.minimizing_m:.17g}",
                f"{r.rel_err:.17g}",
            ]
        )
    return buf.getvalue()


def extended_as_cell(lattice: LatticeSpec, resolution, state: State, n: int, axis=0):
    """Re-declare an n-fold supercell along one axis as a single large cell:
    scaled lattice vectors, per-cell charge and mode indices, and the state
    values tiled periodically.  Exact on the collocation grid."""
    A = lattice.cell_vectors.copy()
    A[axis] = A[axis] * n
    scale = [1, 1, 1]
    scale[axis] = n
    modes = [
        Mode(tuple(int(m.m[j] * scale[j]) for j in range(3)), m.amp, m.phase)
        for m in lattice.rho_b_modes
    ]
    big_lattice = LatticeSpec(A, lattice.Z * n, modes)
    res = list(resolution)
    res[axis] = res[axis] * n
    big_grid = Grid(big_lattice, GridSpec(tuple(res)))
    reps = [1, 1, 1]
    reps[axis] = n
    big_state = State(
        ScalarField(big_grid, np.tile(state.nu_plus.values, reps)),
        ScalarField(big_grid, np.tile(state.nu_minus.values, reps)),
        ScalarField(big_grid, np.tile(state.V.values, reps)),
        state.gauge,
    )
    return big_lattice, big_grid, big_state


def measure_stability_in_n(
    lattice: LatticeSpec,
    resolution,
    n_values=(1, 2, 4),
    n_xi=8,
    axis=0,
    h_value=0.0,
    solve_opts: SolveOptions | None = None,
    threshold=1e-6,
):
    """Measure the stability constant M on increasing supercells.

    The cell ground state is extended periodically and the n-fold supercell
    is treated as a single large cell; the scan samples a fixed set of
    physical quasimomenta (folded into each supercell's own zone), so the
    measured margins test that supercell fibers reproduce the commensurate
    union of cell fibers.
    """
    solve_opts = solve_opts or SolveOptions()
    sol = solve_cell(lattice, GridSpec(tuple(resolution)), h_value, "uniform", solve_opts)
    b_axis = lattice.reciprocal_vectors[axis]
    physical_xis = [(j / n_xi) * b_axis for j in range(n_xi)]
    out = {}
    for n in n_values:
        big_lattice, big_grid, big_state = extended_as_cell(
            lattice, resolution, sol.state, int(n), axis
        )
        folded = []
        for xi in physical_xis:
            w = wrap_to_zone(big_lattice, xi)
            if not any(np.allclose(w, f, atol=1e-12) for f in folded):
                folded.append(w)
        report = stability_scan(
            big_state, h_value, xi_grid=folded, threshold=threshold, refine=False
        )
        out[int(n)] = report
    return out, sol
