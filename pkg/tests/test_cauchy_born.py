import numpy as np
import pytest

from tfdw import cauchy_born as cb
from tfdw.cells import SolveOptions
from tfdw.errors import ContinuationStopError, InfeasibleConstraintError, RangeError
from tfdw.grids import Grid, GridSpec, HField, ScalarField


def test_anchor_is_reused_bitwise(cb_table):
    i0 = cb_table.anchor_index()
    assert cb_table.h_samples[i0] == 0.0
    anchor = cb_table.solutions[i0]
    assert anchor.h_value == 0.0
    # the spline reproduces knot values exactly
    st = cb_table.state_at(0.0)
    assert np.allclose(st.nu_plus.values, anchor.state.nu_plus.values, atol=1e-12)


def test_all_samples_certified(cb_table):
    for sol in cb_table.solutions:
        assert sol.residual_norm <= 1e-11
        assert sol.C_nu_ok
    assert np.all(np.nan_to_num(cb_table.gaps, nan=1.0) > 1e-6)


def test_magnetization_odd_and_energy_even(cb_table):
    m = cb_table.m_tot
    assert np.max(np.abs(m + m[::-1])) < 1e-8
    e = cb_table.E_CB
    assert np.max(np.abs(e - e[::-1])) < 1e-8
    assert cb_table.m_at(0.0) == pytest.approx(0.0, abs=1e-10)


def test_dudh_antisymmetry_at_zero(cb_table):
    i0 = cb_table.anchor_index()
    du = cb_table.dudh[i0]
    assert np.max(np.abs(du.nu_plus.values + du.nu_minus.values)) < 1e-9


def test_dudh_matches_finite_differences(cb_table):
    # centered differences of tabulated solutions against the solved
    # derivative, second-order in the step
    i0 = cb_table.anchor_index()
    du = cb_table.dudh[i0]
    h = cb_table.h_samples
    step = h[i0 + 1] - h[i0]

    def fd(k):
        a = cb_table.solutions[i0 + k].state.nu_plus.values
        b = cb_table.solutions[i0 - k].state.nu_plus.values
        return (a - b) / (2 * k * step)

    err1 = np.max(np.abs(fd(1) - du.nu_plus.values))
    err2 = np.max(np.abs(fd(2) - du.nu_plus.values))
    slope = np.log2(err2 / err1)
    assert 1.6 <= slope <= 2.4


def test_energy_curve_consistency(cb_table):
    vol = cb_table.lattice.volume
    # E_CB(0) is the averaged anchor energy
    anchor = cb_table.solutions[cb_table.anchor_index()]
    assert cb_table.energy_at(0.0) == pytest.approx(anchor.energy.total / vol, rel=1e-12)
    # envelope: dE/dh = -m/|Gamma| at interior samples
    es = cb_table.energy_spline()
    for h in (-0.05, 0.025, 0.0625):
        assert float(es(h, 1)) == pytest.approx(-cb_table.m_at(h) / vol, abs=5e-6)


def test_divided_differences_bounded(cb_table):
    # smoothness surrogate: third divided differences stay bounded
    vals = cb_table._stacked_values()
    h = cb_table.h_samples
    d3 = np.diff(vals, n=3, axis=0) / (h[1] - h[0]) ** 3
    assert np.all(np.isfinite(d3))
    assert np.max(np.abs(d3)) < 1e4


def test_state_spline_range_error(cb_table):
    with pytest.raises(RangeError):
        cb_table.state_at(cb_table.h_max + 0.01)
    with pytest.raises(RangeError):
        cb.E_CB(cb_table, cb_table.h_min - 0.01)


def test_cb_field_constant_is_periodic_extension(cb_table):
    grid = Grid(cb_table.lattice, GridSpec((8, 4, 4), (3, 1, 1)))
    c = 0.05  # a table knot
    state = cb.cb_field(cb_table, c, grid=grid)
    cell_state = cb_table.state_at(c)
    assert np.array_equal(state.nu_plus.values, np.tile(cell_state.nu_plus.values, (3, 1, 1)))
    assert np.max(np.abs(state.v_full_values() - np.tile(cell_state.v_full_values(), (3, 1, 1)))) < 1e-14


def test_cb_field_zero_is_anchor_extension(cb_table):
    grid = Grid(cb_table.lattice, GridSpec((8, 4, 4), (2, 1, 1)))
    state = cb.cb_field(cb_table, 0.0, grid=grid)
    anchor = cb_table.solutions[cb_table.anchor_index()].state
    assert np.array_equal(state.nu_plus.values, np.tile(anchor.nu_plus.values, (2, 1, 1)))


def test_cb_field_range_check(cb_table):
    grid = Grid(cb_table.lattice, GridSpec((8, 4, 4), (2, 1, 1)))
    boom = ScalarField(grid, np.full(grid.shape, cb_table.h_max * 2))
    with pytest.raises(RangeError):
        cb.cb_field(cb_table, boom)


def test_cb_field_modulated_matches_pointwise_spline(cb_table):
    grid = Grid(cb_table.lattice, GridSpec((8, 4, 4), (4, 1, 1)))
    h = HField(0.0, [((1, 0, 0), 0.06)])
    state = cb.cb_field(cb_table, h, eps=0.25, grid=grid)
    h_vals = h.sample(grid, 0.25).values
    # spot-check a few points against a direct per-point spline evaluation
    rng = np.random.default_rng(0)
    for _ in range(5):
        i = tuple(rng.integers(0, s) for s in grid.shape)
        cell_state = cb_table.state_at(float(np.round(h_vals[i], 12)))
        micro = (i[0] % 8, i[1] % 4, i[2] % 4)
        assert state.nu_plus.values[i] == pytest.approx(
            cell_state.nu_plus.values[micro], abs=1e-12
        )


def test_dual_energy_symmetric_point(cb_table):
    e0 = cb.dual_energy(cb_table.lattice, cb_table.grid, 0.0, table=cb_table)
    assert e0 == pytest.approx(cb_table.energy_at(0.0), rel=1e-9)


def test_dual_energy_even_in_m(cb_table):
    m = 0.5 * cb_table.m_range()[1]
    ep = cb.dual_energy(cb_table.lattice, cb_table.grid, m, table=cb_table)
    em = cb.dual_energy(cb_table.lattice, cb_table.grid, -m, table=cb_table)
    assert ep == pytest.approx(em, rel=1e-10)


def test_dual_energy_constraint_enforced(cb_table):
    m = 0.4 * cb_table.m_range()[1]
    res = cb.dual_energy(cb_table.lattice, cb_table.grid, m, table=cb_table, full_result=True)
    assert abs(res.constraint_defect) < 1e-11
    assert res.residual_norm < 1e-10
    # the magnetization multiplier plays the role of a constant field
    assert cb_table.m_at(res.field_multiplier) == pytest.approx(m, abs=1e-6)


def test_dual_energy_infeasible(cb_table):
    lo, hi = cb_table.m_range()
    with pytest.raises(InfeasibleConstraintError):
        cb.dual_energy(cb_table.lattice, cb_table.grid, 2 * hi, table=cb_table)


def test_legendre_identity_single_point(cb_table):
    from tfdw.studies import run_legendre_study

    rows, _ = run_legendre_study(cb_table, [0.04], m_count=9)
    assert rows[0].rel_err <= 1e-6


def test_continuation_stop_reports_last_good(lattice_mod):
    # an absurd certified lower bound on nu stops the march immediately
    opts = SolveOptions(c_nu=1.5)
    with pytest.raises(ContinuationStopError) as err:
        cb.build_cb_table(
            lattice_mod, GridSpec((8, 4, 4)), h_range=0.05, step=0.025,
            opts=opts, verify_samples=False,
        )
    assert err.value.last_good_h == 0.0


def test_table_save_load_roundtrip(tmp_path, cb_table):
    cb.save_table(tmp_path / "table", cb_table)
    loaded = cb.load_table(tmp_path / "table")
    assert np.array_equal(loaded.h_samples, cb_table.h_samples)
    assert np.allclose(loaded.E_CB, cb_table.E_CB, atol=1e-15)
    a = loaded.state_at(0.03125).nu_plus.values
    b = cb_table.state_at(0.03125).nu_plus.values
    assert np.max(np.abs(a - b)) < 1e-13
    cb.export_curves_csv(cb_table, tmp_path / "curves.csv")
    lines = (tmp_path / "curves.csv").read_text().strip().split("\n")
    assert lines[0] == "h,E_CB,m_tot"
    assert len(lines) == len(cb_table.h_samples) + 1
