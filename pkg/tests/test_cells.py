import numpy as np
import pytest

from tfdw import fieldio
from tfdw.cells import (
    CellSolution,
    SolveOptions,
    _phase1_descent,
    initial_state,
    newton_polish,
    save_solution,
    solve_cell,
    verify_minimizer,
)
from tfdw.energy import energy_supercell
from tfdw.errors import PositivityLossError
from tfdw.grids import Grid, GridSpec, LatticeSpec, ScalarField, State
from tfdw.jellium import JelliumParams, jellium_lattice
from tfdw.linop import monkhorst_pack
from tfdw.residual import variational_pairing


def test_jellium_exact_constant_solution():
    params = JelliumParams(0.75)
    lat = jellium_lattice(params)
    sol = solve_cell(lat, GridSpec((4, 4, 4)), 0.0, "uniform", SolveOptions(tol=1e-12))
    assert sol.residual_norm <= 1e-12
    assert np.max(np.abs(sol.state.nu_plus.values - 0.75)) < 1e-12
    assert sol.state.gauge == pytest.approx(-params.multiplier, abs=1e-12)
    assert sol.min_nu == pytest.approx(0.75, abs=1e-12)


def test_modulated_solution_properties(cell_solution, lattice_mod, cell_grid):
    sol = cell_solution
    assert sol.residual_norm <= 1e-11
    # normalization holds exactly after the final retraction
    avg = cell_grid.integrate(sol.state.rho_values()) / cell_grid.n_cells
    assert avg == pytest.approx(lattice_mod.Z, rel=1e-12)
    # exchange-symmetric problem keeps the channels identical at h = 0
    assert np.max(np.abs(sol.state.nu_plus.values - sol.state.nu_minus.values)) < 1e-10
    assert sol.C_nu_ok and sol.min_nu > 1.0


def test_converged_stationarity(cell_solution, rng):
    # finite-difference derivative along a random constraint-tangent
    # direction vanishes at the solution
    from tfdw.grids import random_smooth_field
    from tfdw.residual import normalize_state

    sol = cell_solution
    grid = sol.grid
    nup, num = sol.state.nu_plus.values, sol.state.nu_minus.values
    d_plus = random_smooth_field(grid, rng, 1.0, 1)
    d_minus = random_smooth_field(grid, rng, 1.0, 1)
    denom = grid.inner(nup, nup) + grid.inner(num, num)
    mu = (grid.inner(d_plus, nup) + grid.inner(d_minus, num)) / denom
    d_plus, d_minus = d_plus - mu * nup, d_minus - mu * num
    scale = np.sqrt(grid.l2n(d_plus) ** 2 + grid.l2n(d_minus) ** 2)

    def energy_at(t):
        s = normalize_state(
            State(
                ScalarField(grid, nup + t * d_plus),
                ScalarField(grid, num + t * d_minus),
                sol.state.V,
                0.0,
            )
        )
        return energy_supercell(s, sol.h_value).total

    t = 1e-5
    fd = (energy_at(t) - energy_at(-t)) / (2 * t)
    assert abs(fd) <= 1e-6 * scale


def test_phase1_energy_monotone(lattice_mod, cell_grid):
    opts = SolveOptions(seed=5, perturbation=5e-2)
    start = initial_state(lattice_mod, cell_grid, "perturbed", opts.seed, opts.perturbation)
    rho_b = lattice_mod.rho_b_values(cell_grid)
    _, iters, trace = _phase1_descent(start, 0.0, rho_b, opts)
    assert iters >= 1
    diffs = np.diff(trace)
    assert np.all(diffs <= 1e-13 * np.maximum(np.abs(trace[:-1]), 1.0))


def test_newton_superlinear_decay(cell_solution):
    hist = [r for r in cell_solution.newton_residuals if r > 0]
    # once below 1e-4 the decay is at least quadratic-ish per step
    below = [r for r in hist if r < 1e-4]
    for a, b in zip(below, below[1:]):
        if a > 1e-13:
            assert b <= 50.0 * a**1.5


def test_positivity_guard(lattice_mod, cell_grid, cell_solution):
    opts = SolveOptions(nu_floor=10.0)  # absurd floor: first step must trip
    with pytest.raises(PositivityLossError):
        newton_polish(cell_solution.state, 0.5, opts)


def test_grid_refinement_stability(lattice_mod, cell_solution):
    fine = solve_cell(lattice_mod, GridSpec((16, 4, 4)), 0.0, "uniform", SolveOptions())
    e_coarse = cell_solution.energy.total
    e_fine = fine.energy.total
    assert abs(e_fine - e_coarse) <= 1e-8 * abs(e_fine)


def test_verify_minimizer_stable(cell_solution):
    report = verify_minimizer(
        cell_solution,
        xi_grid=monkhorst_pack(cell_solution.grid.lattice, (2, 2, 2)),
        refine=False,
    )
    assert report.classification == "stable"
    assert np.isfinite(report.M) and report.M > 0


def test_perturbed_preset_reaches_same_ground_state(lattice_mod, cell_grid, cell_solution):
    sol2 = solve_cell(
        lattice_mod, cell_grid, 0.0, "perturbed", SolveOptions(seed=11, perturbation=1e-3)
    )
    assert abs(sol2.energy.total - cell_solution.energy.total) < 1e-9
    assert np.max(np.abs(sol2.state.nu_plus.values - cell_solution.state.nu_plus.values)) < 1e-7


def test_solution_persistence(tmp_path, cell_solution):
    save_solution(tmp_path, "sol", cell_solution)
    state, manifest = fieldio.read_state(tmp_path, "sol")
    assert manifest["residual_norm"] == cell_solution.residual_norm
    assert manifest["energy"]["total"] == cell_solution.energy.total
    assert np.array_equal(state.nu_plus.values, cell_solution.state.nu_plus.values)
    assert state.gauge == cell_solution.state.gauge


def test_constant_field_splits_channels(lattice_mod, cell_grid):
    sol = solve_cell(lattice_mod, cell_grid, 0.05, "uniform", SolveOptions())
    m_tot = cell_grid.integrate(sol.state.m_values())
    assert m_tot > 1e-3  # positive field favors the spin-up channel
    assert sol.residual_norm <= 1e-11
