"""Ground states of the periodic cell problem at constant applied field.

Two phases: a preconditioned projected gradient descent on the spin channels
(with the potential eliminated through the Poisson solve and a normalization
retraction after every step), then a full Newton iteration on the coupled
(nu_+, nu_-, V) system assembled densely on the cell grid.  The returned
solution is a certified stationary point; minimality is only checked through
the linearized gap (verify_minimizer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fieldio
from .energy import EnergyBreakdown, energy_supercell
from .errors import DescentFailureError, DivergenceError, PositivityLossError
from .grids import Grid, GridSpec, LatticeSpec, ScalarField, State, random_smooth_field
from .linop import LinearizedOperator, monkhorst_pack, stability_scan
from .residual import gauge_fit, normalize_state, odd_power, residual, residual_system


@dataclass
class SolveOptions:
    tol: float = 1e-11                 # residual target, averaged (L^2_n)^3 norm
    phase1_tol: float = 1e-3           # projected-gradient norm to hand off to Newton
    phase1_maxiter: int = 800
    newton_maxiter: int = 50
    nu_floor: float = 1e-8             # leaving nu < nu_floor is an error, not a clamp
    c_nu: float | None = None          # certified lower bound; None = positivity only
    seed: int = 0
    perturbation: float = 1e-3


@dataclass
class CellSolution:
    state: State
    h_value: float
    energy: EnergyBreakdown
    residual_norm: float
    min_nu: float
    C_nu_ok: bool
    preset: str = "uniform"
    seed: int = 0
    phase1_iterations: int = 0
    newton_iterations: int = 0
    newton_residuals: list[float] = field(default_factory=list)

    @property
    def grid(self):
        return self.state.grid


def initial_state(lattice: LatticeSpec, grid: Grid, preset="uniform", seed=0, perturbation=1e-3) -> State:
    nu0 = np.sqrt(lattice.Z / (2.0 * lattice.volume))
    vals = np.full(grid.shape, nu0)
    if preset == "perturbed":
        rng = np.random.default_rng(seed)
        vals = vals + perturbation * random_smooth_field(grid, rng, amplitude=1.0, kmax=2)
    elif preset != "uniform":
        raise ValueError(f"unknown init preset {preset!r}")
    state = State(
        ScalarField(grid, vals.copy()),
        ScalarField(grid, vals.copy()),
        ScalarField(grid, np.zeros(grid.shape)),
        0.0,
    )
    return normalize_state(state)


def _phase1_descent(state: State, h_value, rho_b, opts: SolveOptions):
    """Projected gradient descent on (nu_+, nu_-); V eliminated each step.

    Returns (state, iterations, energy_trace); energy decreases monotonically
    (backtracking line search), which is asserted per step.
    """
    grid = state.grid
    nup = state.nu_plus.values.copy()
    num = state.nu_minus.values.copy()

    def make_state(a, b):
        s = State(ScalarField(grid, a), ScalarField(grid, b), state.V, 0.0)
        return normalize_state(s)

    def energy_of(a, b):
        return energy_supercell(make_state(a, b), h_value, rho_b).total

    trace = [energy_of(nup, num)]
    step = 1.0
    iterations = 0
    for iterations in range(1, opts.phase1_maxiter + 1):
        rho = nup * nup + num * num
        V = grid.poisson(4.0 * np.pi * (rho - rho_b))
        grads = []
        for nu, sgn in ((nup, -1.0), (num, +1.0)):
            g = 2.0 * (
                -grid.laplacian(nu)
                + (5.0 / 3.0) * odd_power(nu, 7.0 / 3.0)
                - (4.0 / 3.0) * odd_power(nu, 5.0 / 3.0)
                + (V + sgn * h_value) * nu
            )
            grads.append(g)
        gp, gm = grads
        denom = grid.inner(nup, nup) + grid.inner(num, num)
        mu = (grid.inner(gp, nup) + grid.inner(gm, num)) / denom
        pgp = gp - mu * nup
        pgm = gm - mu * num
        pg_norm = np.sqrt(grid.l2n(pgp) ** 2 + grid.l2n(pgm) ** 2)
        if pg_norm <= opts.phase1_tol:
            break
        dp = grid.helmholtz_inverse(pgp)
        dm = grid.helmholtz_inverse(pgm)
        proj = (grid.inner(dp, nup) + grid.inner(dm, num)) / denom
        dp -= proj * nup
        dm -= proj * num
        slope = grid.inner(pgp, dp) + grid.inner(pgm, dm)
        e0 = trace[-1]
        t = min(4.0 * step, 1.0)
        accepted = False
        while t > 1e-16:
            e_try = energy_of(nup - t * dp, num - t * dm)
            if e_try <= e0 - 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            raise DescentFailureError(
                f"descent stagnated at iteration {iterations} "
                f"(projected gradient {pg_norm:.3e})",
                energy_trace=trace,
            )
        step = t
        trial = make_state(nup - t * dp, num - t * dm)
        nup = trial.nu_plus.values
        num = trial.nu_minus.values
        e_new = energy_of(nup, num)
        assert e_new <= e0 + 1e-13 * max(abs(e0), 1.0), "descent energy increased"
        trace.append(e_new)

    rho = nup * nup + num * num
    V = grid.poisson(4.0 * np.pi * (rho - rho_b))
    out = State(ScalarField(grid, nup), ScalarField(grid, num), ScalarField(grid, V), 0.0)
    return out, iterations, trace


def newton_polish(state: State, h_value, opts: SolveOptions, rho_b=None):
    """Full Newton on the coupled (nu_+, nu_-, V) system, dense on the cell.

    Each step solves the symmetric linearization against the scaled residual;
    the potential's mean develops freely and carries the multiplier.  Returns
    (state, residual_norm, iterations, residual_history).
    """
    grid = state.grid
    if rho_b is None:
        rho_b = grid.lattice.rho_b_values(grid)
    work = state.copy()
    history = [residual(work, h_value, rho_b).norm_l2n()]
    iterations = 0
    N = grid.total_points
    target = 0.1 * opts.tol
    while history[-1] > target and iterations < opts.newton_maxiter:
        f_plus, f_minus, f_v = residual_system(work, h_value, rho_b)
        H = LinearizedOperator(work, h_value).dense_matrix()
        rhs = np.concatenate([f_plus.ravel(), f_minus.ravel(), f_v.ravel()])
        d = np.linalg.solve(H, rhs)
        nup = work.nu_plus.values - d[:N].reshape(grid.shape)
        num = work.nu_minus.values - d[N : 2 * N].reshape(grid.shape)
        v_full = work.v_full_values() - d[2 * N :].reshape(grid.shape)
        gauge = float(np.mean(v_full))
        work = State(
            ScalarField(grid, nup),
            ScalarField(grid, num),
            ScalarField(grid, v_full - gauge),
            gauge,
        )
        min_nu = min(nup.min(), num.min())
        if min_nu < opts.nu_floor:
            raise PositivityLossError(
                f"nu dropped to {min_nu:.3e} (< floor {opts.nu_floor:.1e}) during Newton; "
                "the interior-branch assumption is violated"
            )
        iterations += 1
        history.append(residual(work, h_value, rho_b).norm_l2n())
    if history[-1] > opts.tol:
        raise DivergenceError(
            f"cell Newton stalled at residual {history[-1]:.3e} after {iterations} steps"
        )
    # exact retraction onto the constraint, then the least-squares gauge
    work = normalize_state(work)
    work = State(work.nu_plus, work.nu_minus, work.V, gauge_fit(work, h_value))
    history.append(residual(work, h_value, rho_b).norm_l2n())
    return work, history[-1], iterations, history


def solve_cell(
    lattice: LatticeSpec,
    grid: Grid | GridSpec,
    h_value: float = 0.0,
    init="uniform",
    opts: SolveOptions | None = None,
) -> CellSolution:
    """Stationary point of the cell functional at constant applied field."""
    opts = opts or SolveOptions()
    if isinstance(grid, GridSpec):
        grid = Grid(lattice, grid)
    rho_b = lattice.rho_b_values(grid)

    if isinstance(init, State):
        start, preset = init.copy(), "state"
    else:
        preset = init
        start = initial_state(lattice, grid, init, opts.seed, opts.perturbation)

    phase1_state, p1_iter, _trace = _phase1_descent(start, h_value, rho_b, opts)
    phase1_state = State(
        phase1_state.nu_plus,
        phase1_state.nu_minus,
        phase1_state.V,
        gauge_fit(phase1_state, h_value),
    )
    state, res_norm, n_iter, history = newton_polish(phase1_state, h_value, opts, rho_b)

    min_nu = float(min(state.nu_plus.values.min(), state.nu_minus.values.min()))
    c_nu = opts.c_nu if opts.c_nu is not None else opts.nu_floor
    return CellSolution(
        state=state,
        h_value=float(h_value),
        energy=energy_supercell(state, h_value, rho_b),
        residual_norm=res_norm,
        min_nu=min_nu,
        C_nu_ok=bool(min_nu >= c_nu),
        preset=preset,
        seed=opts.seed,
        phase1_iterations=p1_iter,
        newton_iterations=n_iter,
        newton_residuals=history,
    )


def verify_minimizer(sol: CellSolution, xi_grid=None, threshold=1e-6, refine=True):
    """Stability certificate at a converged solution (delegates to the
    fiber scan); usable for continuation only when the gap clears the
    instability threshold."""
    return stability_scan(
        sol.state, sol.h_value, xi_grid=xi_grid, threshold=threshold, refine=refine
    )


def save_solution(directory, name, sol: CellSolution):
    extra = {
        "h_value": sol.h_value,
        "energy": {
            "thomas_fermi": sol.energy.thomas_fermi,
            "weizsacker": sol.energy.weizsacker,
            "dirac": sol.energy.dirac,
            "coulomb": sol.energy.coulomb,
            "zeeman": sol.energy.zeeman,
            "total": sol.energy.total,
        },
        "residual_norm": sol.residual_norm,
        "min_nu": sol.min_nu,
        "C_nu_ok": sol.C_nu_ok,
        "preset": sol.preset,
        "seed": sol.seed,
    }
    return fieldio.write_state(directory, name, sol.state, extra)
