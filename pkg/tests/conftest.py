import numpy as np
import pytest

from tfdw import cauchy_born as cb
from tfdw.cells import SolveOptions, solve_cell
from tfdw.grids import Grid, GridSpec, LatticeSpec


# Workhorse configuration: unit cube, three electrons per cell, a smooth
# background modulated along the first axis.  Stable with a wide margin.
MOD_AMP = 0.15
Z = 3.0


@pytest.fixture(scope="session")
def lattice_mod():
    return LatticeSpec.cubic(1.0, Z, [((1, 0, 0), MOD_AMP)])


@pytest.fixture(scope="session")
def cell_grid(lattice_mod):
    return Grid(lattice_mod, GridSpec((8, 4, 4)))


@pytest.fixture(scope="session")
def cell_solution(lattice_mod, cell_grid):
    return solve_cell(lattice_mod, cell_grid, 0.0, "uniform", SolveOptions())


@pytest.fixture(scope="session")
def cb_table(lattice_mod):
    return cb.build_cb_table(
        lattice_mod,
        GridSpec((8, 4, 4)),
        h_range=0.1,
        step=0.0125,
        opts=SolveOptions(),
        verify_samples=True,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
