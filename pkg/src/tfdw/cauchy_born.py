"""Constant-field cell solutions as a map of the applied field.

``build_cb_table`` continues the zero-field ground state through
predictor-corrector steps in h, certifying the linearized gap at every
sample.  The tabulated map supports spline evaluation of the state, its
h-derivative, the averaged cell energy and the cell magnetization; the
``cb_field`` operation modulates the map by a slowly varying field, which is
the leading-order (locally periodic) approximation on a supercell.

A dual formulation fixes the cell magnetization instead of the field: the
constrained solve carries a second multiplier that plays exactly the role of
a constant applied field, and the two energies are Legendre transforms of one
another in averaged per-cell units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import fieldio
from .cells import CellSolution, SolveOptions, newton_polish, solve_cell, verify_minimizer
from .energy import energy_supercell
from .errors import (
    ContinuationStopError,
    InfeasibleConstraintError,
    RangeError,
    StabilityGapError,
    StructuralError,
    TfdwError,
)
from .grids import Grid, GridSpec, HField, LatticeSpec, ScalarField, State
from .linop import LinearizedOperator
from .residual import residual, residual_system


def solve_du_dh(sol: CellSolution) -> State:
    """Differentiate the stationarity system in h: the derivative triple
    solves  L_h (du/dh) = (nu_+, -nu_-, 0)."""
    grid = sol.grid
    op = LinearizedOperator(sol.state, sol.h_value)
    H = op.dense_matrix()
    N = grid.total_points
    rhs = np.concatenate(
        [sol.state.nu_plus.values.ravel(), -sol.state.nu_minus.values.ravel(), np.zeros(N)]
    )
    x = np.linalg.solve(H, rhs)
    v_part = x[2 * N :].reshape(grid.shape)
    gauge = float(np.mean(v_part))
    return State(
        ScalarField(grid, x[:N].reshape(grid.shape)),
        ScalarField(grid, x[N : 2 * N].reshape(grid.shape)),
        ScalarField(grid, v_part - gauge),
        gauge,
    )


@dataclass
class CBTable:
    """Sampled constant-field map h -> (state, averaged energy, cell
    magnetization) with derivative data and per-sample stability gaps."""

    lattice: LatticeSpec
    grid: Grid
    h_samples: np.ndarray
    solutions: list[CellSolution]
    dudh: list[State]
    E_CB: np.ndarray
    m_tot: np.ndarray
    gaps: np.ndarray
    c_nu: float
    _state_spline: CubicSpline | None = field(default=None, repr=False)
    _energy_spline: CubicSpline | None = field(default=None, repr=False)
    _m_spline: CubicSpline | None = field(default=None, repr=False)

    @property
    def h_min(self):
        return float(self.h_samples[0])

    @property
    def h_max(self):
        return float(self.h_samples[-1])

    def anchor_index(self):
        return int(np.argmin(np.abs(self.h_samples)))

    def check_range(self, h_values):
        lo = np.min(h_values)
        hi = np.max(h_values)
        if lo < self.h_min - 1e-12 or hi > self.h_max + 1e-12:
            raise RangeError(
                f"requested field range [{lo:.6g}, {hi:.6g}] exceeds the tabulated "
                f"range [{self.h_min:.6g}, {self.h_max:.6g}]"
            )

    def _stacked_values(self):
        rows = []
        for sol in self.solutions:
            s = sol.state
            rows.append(
                np.concatenate(
                    [
                        s.nu_plus.values.ravel(),
                        s.nu_minus.values.ravel(),
                        s.v_full_values().ravel(),
                    ]
                )
            )
        return np.array(rows)

    def state_spline(self):
        # cubic spline of collocation values; values are linear in the
        # spectral coefficients, so this equals a coefficient-space spline
        if self._state_spline is None:
            self._state_spline = CubicSpline(self.h_samples, self._stacked_values(), axis=0)
        return self._state_spline

    def energy_spline(self):
        if self._energy_spline is None:
            self._energy_spline = CubicSpline(self.h_samples, self.E_CB)
        return self._energy_spline

    def m_spline(self):
        if self._m_spline is None:
            self._m_spline = CubicSpline(self.h_samples, self.m_tot)
        return self._m_spline

    def state_at(self, h) -> State:
        """Spline-interpolated cell state at field value h."""
        self.check_range([h])
        row = self.state_spline()(float(h))
        N = self.grid.total_points
        v_full = row[2 * N :].reshape(self.grid.shape)
        gauge = float(np.mean(v_full))
        return State(
            ScalarField(self.grid, row[:N].reshape(self.grid.shape)),
            ScalarField(self.grid, row[N : 2 * N].reshape(self.grid.shape)),
            ScalarField(self.grid, v_full - gauge),
            gauge,
        )

    def energy_at(self, h) -> float:
        self.check_range([h])
        return float(self.energy_spline()(float(h)))

    def m_at(self, h) -> float:
        self.check_range([h])
        return float(self.m_spline()(float(h)))

    def m_range(self):
        return float(np.min(self.m_tot)), float(np.max(self.m_tot))

    def h_for_m(self, m_target) -> float:
        """Invert the (monotone) magnetization curve through the spline."""
        lo, hi = self.m_range()
        if not (lo < m_target < hi):
            raise InfeasibleConstraintError(
                f"target magnetization {m_target:.6g} outside attainable ({lo:.6g}, {hi:.6g})"
            )
        spline = self.m_spline()
        hs = np.linspace(self.h_min, self.h_max, 2001)
        vals = spline(hs) - m_target
        idx = np.nonzero(np.diff(np.sign(vals)) != 0)[0]
        if idx.size == 0:
            raise InfeasibleConstraintError("magnetization curve does not reach the target")
        a, b = hs[idx[0]], hs[idx[0] + 1]
        from scipy.optimize import brentq

        return float(brentq(lambda h: float(spline(h)) - m_target, a, b, xtol=1e-14))


def E_CB(table: CBTable, h) -> float:
    """Averaged cell energy of the constant-field map (cubic interpolation)."""
    return table.energy_at(h)


def m_of_h(table: CBTable, h) -> float:
    return table.m_at(h)


def build_cb_table(
    lattice: LatticeSpec,
    grid: Grid | GridSpec,
    h_range: float,
    step: float,
    opts: SolveOptions | None = None,
    stability_threshold: float = 1e-6,
    stability_xi_grid=None,
    verify_samples: bool = True,
) -> CBTable:
    """Predictor-corrector continuation of the zero-field solution over
    h in [-h_range, h_range].

    The anchor solve is certified with a refined stability scan; subsequent
    samples are checked on the declared xi grid.  Corrector divergence or a
    collapsing gap stops the march and reports the last good h.
    """
    opts = opts or SolveOptions()
    if isinstance(grid, GridSpec):
        grid = Grid(lattice, grid)
    if step <= 0 or h_range <= 0:
        raise StructuralError("h_range and step must be positive")
    n_steps = int(round(h_range / step))
    if abs(n_steps * step - h_range) > 1e-12:
        raise StructuralError("step must divide h_range")

    anchor = solve_cell(lattice, grid, 0.0, "uniform", opts)
    report = verify_minimizer(anchor, xi_grid=stability_xi_grid, threshold=stability_threshold, refine=True)
    if report.classification != "stable":
        raise StabilityGapError(
            f"zero-field solution is not stable ({report.classification}, gap {report.global_gap:.3e})"
        )
    c_nu = 0.5 * anchor.min_nu if opts.c_nu is None else opts.c_nu
    march_opts = SolveOptions(**{**opts.__dict__, "c_nu": c_nu})

    entries = {0: (anchor, report.global_gap)}
    for direction in (+1, -1):
        prev = anchor
        for k in range(1, n_steps + 1):
            h_new = direction * k * step
            dudh_prev = solve_du_dh(prev)
            dh = h_new - prev.h_value
            predictor = State(
                ScalarField(grid, prev.state.nu_plus.values + dh * dudh_prev.nu_plus.values),
                ScalarField(grid, prev.state.nu_minus.values + dh * dudh_prev.nu_minus.values),
                ScalarField(grid, prev.state.V.values + dh * dudh_prev.V.values),
                prev.state.gauge + dh * dudh_prev.gauge,
            )
            try:
                state, res_norm, n_iter, history = newton_polish(predictor, h_new, march_opts)
            except TfdwError as exc:
                raise ContinuationStopError(
                    f"corrector failed at h = {h_new:.6g}: {exc}",
                    last_good_h=prev.h_value,
                ) from exc
            min_nu = float(min(state.nu_plus.values.min(), state.nu_minus.values.min()))
            sol = CellSolution(
                state=state,
                h_value=h_new,
                energy=energy_supercell(state, h_new),
                residual_norm=res_norm,
                min_nu=min_nu,
                C_nu_ok=bool(min_nu >= c_nu),
                preset="continuation",
                seed=opts.seed,
                newton_iterations=n_iter,
                newton_residuals=history,
            )
            if not sol.C_nu_ok:
                raise ContinuationStopError(
                    f"nu dropped below the certified bound C_nu = {c_nu:.3e} at h = {h_new:.6g}",
                    last_good_h=prev.h_value,
                )
            gap = None
            if verify_samples:
                rep = verify_minimizer(
                    sol, xi_grid=stability_xi_grid, threshold=stability_threshold, refine=False
                )
                if rep.classification != "stable":
                    raise ContinuationStopError(
                        f"stability gap collapsed at h = {h_new:.6g} "
                        f"({rep.classification}, gap {rep.global_gap:.3e})",
                        last_good_h=prev.h_value,
                    )
                gap = rep.global_gap
            entries[direction * k] = (sol, gap)
            prev = sol

    order = sorted(entries.keys())
    solutions = [entries[k][0] for k in order]
    gaps = np.array([entries[k][1] if entries[k][1] is not None else np.nan for k in order])
    h_samples = np.array([s.h_value for s in solutions])
    vol = lattice.volume
    E = np.array([energy_supercell(s.state, s.h_value).total / vol for s in solutions])
    m = np.array([s.grid.integrate(s.state.m_values()) for s in solutions])
    dudh = [solve_du_dh(s) for s in solutions]
    return CBTable(
        lattice=lattice,
        grid=grid,
        h_samples=h_samples,
        solutions=solutions,
        dudh=dudh,
        E_CB=E,
        m_tot=m,
        gaps=gaps,
        c_nu=c_nu,
    )


def cb_field(table: CBTable, h_field, eps=None, grid=None) -> State:
    """Modulate the constant-field map by a slowly varying field: at each
    supercell point x the state is the tabulated cell solution for the local
    field value, evaluated at the point's position within its cell."""
    if isinstance(h_field, ScalarField):
        grid = h_field.grid
        h_vals = h_field.values
    elif isinstance(h_field, HField):
        if grid is None:
            raise StructuralError("cb_field needs a supercell grid when given an HField")
        if eps is None:
            eps = 1.0 / max(grid.spec.supercell)
        h_vals = h_field.sample(grid, eps).values
    else:
        if grid is None:
            raise StructuralError("cb_field needs a grid for a constant field value")
        h_vals = np.full(grid.shape, float(h_field))
    if grid.spec.resolution != table.grid.spec.resolution:
        raise StructuralError("supercell grid must refine the tabulated cell grid")
    table.check_range(h_vals.ravel())

    flat_h = h_vals.ravel()
    uniq, inverse = np.unique(np.round(flat_h, 12), return_inverse=True)
    rows = table.state_spline()(uniq)  # (n_distinct, 3N)

    N = table.grid.total_points
    shape = grid.shape
    res = table.grid.shape
    idx = np.indices(shape)
    micro = np.ravel_multi_index(
        tuple(idx[j] % res[j] for j in range(3)), res
    ).ravel()

    out = []
    for c in range(3):
        comp = rows[:, c * N : (c + 1) * N]
        out.append(comp[inverse, micro].reshape(shape))
    v_full = out[2]
    gauge = float(np.mean(v_full))
    return State(
        ScalarField(grid, out[0]),
        ScalarField(grid, out[1]),
        ScalarField(grid, v_full - gauge),
        gauge,
    )


@dataclass
class DualSolution:
    state: State
    m_target: float
    field_multiplier: float
    energy: float            # averaged cell energy without the Zeeman term
    residual_norm: float
    constraint_defect: float


def dual_energy(
    lattice: LatticeSpec,
    grid: Grid | GridSpec,
    m_target: float,
    opts: SolveOptions | None = None,
    table: CBTable | None = None,
    init=None,
    mu0=None,
    full_result=False,
):
    """Cell energy at fixed cell magnetization.

    The solve carries two multipliers: the gauge constant for the
    normalization and a field-like multiplier mu for the magnetization,
    entering the two channels with opposite signs.  The bordered Newton
    system treats mu as an explicit unknown against the constraint row.
    """
    opts = opts or SolveOptions()
    if isinstance(grid, GridSpec):
        grid = Grid(lattice, grid)
    rho_b = lattice.rho_b_values(grid)

    if table is not None:
        mu = table.h_for_m(m_target)
        work = table.state_at(mu)
    else:
        mu = 0.0 if mu0 is None else float(mu0)
        work = (init or solve_cell(lattice, grid, mu, "uniform", opts).state).copy()

    N = grid.total_points
    vol = lattice.volume

    def constraint(state):
        return grid.integrate(state.m_values()) - m_target

    history = []
    for _ in range(opts.newton_maxiter):
        r = residual(work, mu, rho_b)
        c_m = constraint(work)
        err = np.sqrt(r.norm_l2n() ** 2 + c_m**2)
        history.append(err)
        if err <= opts.tol:
            break
        f_plus, f_minus, f_v = residual_system(work, mu, rho_b)
        H = LinearizedOperator(work, mu).dense_matrix()
        K = np.zeros((3 * N + 1, 3 * N + 1))
        K[: 3 * N, : 3 * N] = H
        # d residual / d mu
        K[:N, -1] = -work.nu_plus.values.ravel()
        K[N : 2 * N, -1] = work.nu_minus.values.ravel()
        # constraint row
        K[-1, :N] = 2.0 * grid.w_quad * work.nu_plus.values.ravel()
        K[-1, N : 2 * N] = -2.0 * grid.w_quad * work.nu_minus.values.ravel()
        rhs = np.concatenate([f_plus.ravel(), f_minus.ravel(), f_v.ravel(), [c_m]])
        d = np.linalg.solve(K, rhs)
        nup = work.nu_plus.values - d[:N].reshape(grid.shape)
        num = work.nu_minus.values - d[N : 2 * N].reshape(grid.shape)
        v_full = work.v_full_values() - d[2 * N : 3 * N].reshape(grid.shape)
        mu = mu - float(d[-1])
        gauge = float(np.mean(v_full))
        work = State(
            ScalarField(grid, nup),
            ScalarField(grid, num),
            ScalarField(grid, v_full - gauge),
            gauge,
        )
        if min(nup.min(), num.min()) < opts.nu_floor:
            raise InfeasibleConstraintError(
                f"constrained solve lost positivity targeting m = {m_target:.6g}"
            )
    else:
        raise InfeasibleConstraintError(
            f"constrained solve did not converge for m = {m_target:.6g} "
            f"(last error {history[-1]:.3e})"
        )

    energy = energy_supercell(work, 0.0, rho_b).total / vol
    result = DualSolution(
        state=work,
        m_target=float(m_target),
        field_multiplier=float(mu),
        energy=float(energy),
        residual_norm=float(residual(work, mu, rho_b).norm_l2n()),
        constraint_defect=float(constraint(work)),
    )
    return result if full_result else result.energy


def save_table(directory, table: CBTable):
    """Persist the table: manifest plus per-sample state and derivative
    fields as .tfw files."""
    import json
    import os

    os.makedirs(directory, exist_ok=True)
    for i, (sol, du) in enumerate(zip(table.solutions, table.dudh)):
        fieldio.write_state(directory, f"sample_{i:03d}", sol.state, {"h_value": sol.h_value})
        fieldio.write_state(directory, f"dudh_{i:03d}", du, {"h_value": sol.h_value})
    manifest = {
        "lattice": table.lattice.descriptor(),
        "resolution": list(table.grid.spec.resolution),
        "supercell": list(table.grid.spec.supercell),
        "h_samples": [float(h) for h in table.h_samples],
        "E_CB": [float(e) for e in table.E_CB],
        "m_tot": [float(m) for m in table.m_tot],
        "gaps": [None if np.isnan(g) else float(g) for g in table.gaps],
        "c_nu": table.c_nu,
        "residual_norms": [s.residual_norm for s in table.solutions],
    }
    fieldio.atomic_write_text(os.path.join(directory, "table.json"), json.dumps(manifest, indent=2, sort_keys=True))


def load_table(directory) -> CBTable:
    import json
    import os

    with open(os.path.join(directory, "table.json")) as fh:
        manifest = json.load(fh)
    lattice = LatticeSpec.from_descriptor(manifest["lattice"])
    grid = Grid(lattice, GridSpec(tuple(manifest["resolution"]), tuple(manifest["supercell"])))
    solutions = []
    dudh = []
    for i, h in enumerate(manifest["h_samples"]):
        state, _ = fieldio.read_state(directory, f"sample_{i:03d}", grid)
        du, _ = fieldio.read_state(directory, f"dudh_{i:03d}", grid)
        min_nu = float(min(state.nu_plus.values.min(), state.nu_minus.values.min()))
        solutions.append(
            CellSolution(
                state=state,
                h_value=float(h),
                energy=energy_supercell(state, float(h)),
                residual_norm=manifest["residual_norms"][i],
                min_nu=min_nu,
                C_nu_ok=bool(min_nu >= manifest["c_nu"]),
                preset="loaded",
            )
        )
        dudh.append(du)
    gaps = np.array([np.nan if g is None else g for g in manifest["gaps"]])
    return CBTable(
        lattice=lattice,
        grid=grid,
        h_samples=np.array(manifest["h_samples"]),
        solutions=solutions,
        dudh=dudh,
        E_CB=np.array(manifest["E_CB"]),
        m_tot=np.array(manifest["m_tot"]),
        gaps=gaps,
        c_nu=manifest["c_nu"],
    )


def export_curves_csv(table: CBTable, path):
    """CSV of (h, E_CB, m_tot) over the tabulated samples."""
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["h", "E_CB", "m_tot"])
    for h, e, m in zip(table.h_samples, table.E_CB, table.m_tot):
        writer.writerow([f"{h:.17g}", f"{e:.17g}", f"{m:.17g}"])
    fieldio.atomic_write_text(path, buf.getvalue())
