import json

import numpy as np
import pytest

from tfdw import cauchy_born as cb
from tfdw import twoscale as ts
from tfdw.grids import Grid, GridSpec, HField, ScalarField, State, random_smooth_field
from tfdw.newton import (
    NewtonOptions,
    newton_solve,
    operator_drift,
    state_distance,
)
from tfdw.residual import gauge_fit, residual


@pytest.fixture(scope="module")
def sweep_point(cb_table):
    """One supercell problem: n = 6 with the standard modulated field."""
    n = 6
    grid = Grid(cb_table.lattice, GridSpec((8, 4, 4), (n, 1, 1)))
    h = HField(0.0, [((1, 0, 0), 0.08)])
    u0, _ = ts.build_u0(cb_table, h, grid, 1.0 / n)
    h_vals = h.sample(grid, 1.0 / n)
    return grid, u0, h_vals


def test_fixed_point_zero_iterations(cb_table):
    grid = Grid(cb_table.lattice, GridSpec((8, 4, 4), (2, 1, 1)))
    h = HField(0.05)
    u0, _ = ts.build_u0(cb_table, h, grid, 0.5)
    h_vals = h.sample(grid, 0.5)
    u_star, trace = newton_solve(u0, h_vals, NewtonOptions(tol=1e-9))
    assert trace.converged
    assert trace.increments == []
    assert trace.contraction_ratios == []
    assert np.array_equal(u_star.nu_plus.values, u0.nu_plus.values)
    assert u_star.gauge == u0.gauge
    assert trace.distance_to_u0 == 0.0


def test_convergence_and_contraction(sweep_point):
    grid, u0, h_vals = sweep_point
    u_star, trace = newton_solve(u0, h_vals, NewtonOptions(tol=1e-10))
    assert trace.converged
    assert trace.iterates[-1] <= 1e-10
    assert len(trace.increments) >= 2
    assert trace.contraction_max <= 0.5
    # increments decrease geometrically
    assert all(r <= 0.5 for r in trace.contraction_ratios)


def test_fixed_point_property(sweep_point):
    grid, u0, h_vals = sweep_point
    u_star, _ = newton_solve(u0, h_vals, NewtonOptions(tol=1e-10))
    again, trace = newton_solve(u_star, h_vals, NewtonOptions(tol=1e-9))
    assert trace.increments == []  # terminates immediately
    assert state_distance(again, u_star) == 0.0


def test_gauge_consistency(sweep_point):
    grid, u0, h_vals = sweep_point
    u_star, trace = newton_solve(u0, h_vals, NewtonOptions(tol=1e-10))
    refit = gauge_fit(u_star, h_vals)
    res_before = residual(u_star, h_vals).norm_l2n()
    refitted = State(u_star.nu_plus, u_star.nu_minus, u_star.V, refit)
    res_after = residual(refitted, h_vals).norm_l2n()
    assert abs(res_after - res_before) < 1e-12


def test_local_uniqueness(sweep_point, rng):
    grid, u0, h_vals = sweep_point
    results = []
    for k in range(2):
        pert = 1e-6 * random_smooth_field(grid, rng, 1.0, 1, supercell_modes=True)
        start = State(
            ScalarField(grid, u0.nu_plus.values + pert),
            ScalarField(grid, u0.nu_minus.values - pert),
            u0.V,
            u0.gauge,
        )
        u_star, trace = newton_solve(start, h_vals, NewtonOptions(tol=1e-11))
        assert trace.converged
        results.append(u_star)
    assert state_distance(results[0], results[1]) <= 1e-9


def test_distances_recorded(sweep_point, cb_table):
    grid, u0, h_vals = sweep_point
    u_cb = cb.cb_field(cb_table, h_vals, 1.0 / 6.0)
    u_star, trace = newton_solve(u0, h_vals, NewtonOptions(tol=1e-10), u_cb=u_cb)
    assert trace.distance_to_u0 > 0
    assert trace.distance_to_cb > trace.distance_to_u0  # eps vs eps^3 scale


def test_full_newton_mode_agrees(sweep_point):
    grid, u0, h_vals = sweep_point
    frozen, _ = newton_solve(u0, h_vals, NewtonOptions(tol=1e-11))
    refreshed, trace = newton_solve(
        u0, h_vals, NewtonOptions(tol=1e-11, refresh_jacobian=True)
    )
    assert trace.converged
    assert state_distance(frozen, refreshed) <= 1e-9


def test_trace_serialization(sweep_point, tmp_path):
    grid, u0, h_vals = sweep_point
    _, trace = newton_solve(u0, h_vals, NewtonOptions(tol=1e-10))
    payload = json.loads(trace.to_json())
    assert payload["converged"] is True
    trace.write_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().strip().split("\n")
    assert lines[0] == "step,residual,increment,ratio"
    assert len(lines) == len(trace.iterates) + 1


def test_operator_drift_zero_and_shift(cell_solution):
    state = cell_solution.state
    assert operator_drift(state, state, 0.0) == 0.0
    shifted = State(state.nu_plus, state.nu_minus, state.V, state.gauge + 0.37)
    drift = operator_drift(shifted, state, 0.0)
    assert drift == pytest.approx(0.37, rel=1e-12)


def test_operator_drift_bounded_by_sup_norm(cell_solution, rng):
    state = cell_solution.state
    grid = state.grid
    ratios = []
    for amp in (1e-3, 1e-2):
        pert = amp * random_smooth_field(grid, rng, 1.0, 1)
        other = State(
            ScalarField(grid, state.nu_plus.values + pert),
            ScalarField(grid, state.nu_minus.values - 0.5 * pert),
            state.V,
            state.gauge,
        )
        drift = operator_drift(other, state, 0.0)
        sup = np.max(np.abs(pert))
        assert drift > 0
        ratios.append(drift / sup)
    # the constant in drift <= C * sup-norm is stable across amplitudes
    assert 0.1 < ratios[0] / ratios[1] < 10.0


def test_gap_precondition_estimate(cb_table):
    grid = Grid(cb_table.lattice, GridSpec((8, 4, 4), (4, 1, 1)))
    h = HField(0.0, [((1, 0, 0), 0.06)])
    u0, _ = ts.build_u0(cb_table, h, grid, 0.25)
    h_vals = h.sample(grid, 0.25)
    _, trace = newton_solve(
        u0, h_vals, NewtonOptions(tol=1e-9, check_gap=True, gap_iters=25)
    )
    assert trace.converged
    # the estimate approaches the true margin from above
    assert trace.gap_estimate is not None and trace.gap_estimate > 0.1
