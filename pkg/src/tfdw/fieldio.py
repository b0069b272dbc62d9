"""Portable field files (".tfw") and state/solution manifests.

A .tfw file is a single JSON header line (UTF-8, newline terminated) carrying
the grid metadata, followed by the raw field values as little-endian 8-byte
IEEE-754 floats in row-major axis order.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import StructuralError
from .grids import Grid, GridSpec, LatticeSpec, ScalarField, State

TFW_MAGIC = "tfw"
TFW_VERSION = 1


def _grid_header(grid: Grid):
    return {
        "format": TFW_MAGIC,
        "version": TFW_VERSION,
        "lattice": grid.lattice.descriptor(),
        "resolution": list(grid.spec.resolution),
        "supercell": list(grid.spec.supercell),
        "domain": grid.domain,
    }


def grid_from_header(header) -> Grid:
    lattice = LatticeSpec.from_descriptor(header["lattice"])
    spec = GridSpec(tuple(header["resolution"]), tuple(header["supercell"]))
    return Grid(lattice, spec)


def write_field(path, fld: ScalarField):
    header = json.dumps(_grid_header(fld.grid), sort_keys=True)
    payload = np.ascontiguousarray(fld.values, dtype="<f8").tobytes()
    atomic_write_bytes(path, header.encode("utf-8") + b"\n" + payload)


def read_field(path, grid: Grid | None = None) -> ScalarField:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != TFW_MAGIC:
        raise StructuralError(f"{path} is not a .tfw field file")
    file_grid = grid_from_header(header)
    if grid is not None:
        if grid != file_grid:
            raise StructuralError(f"{path} carries a different grid than expected")
        file_grid = grid
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != file_grid.total_points:
        raise StructuralError(
            f"{path}: expected {file_grid.total_points} values, found {values.size}"
        )
    return ScalarField(file_grid, values.reshape(file_grid.shape).copy())


def write_state(directory, name, state: State, extra=None):
    """Persist a state as three .tfw files plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for tag, fld in (("nu_plus", state.nu_plus), ("nu_minus", state.nu_minus), ("V", state.V)):
        fname = f"{name}_{tag}.tfw"
        write_field(os.path.join(directory, fname), fld)
        files[tag] = fname
    manifest = {"fields": files, "gauge": state.gauge}
    if extra:
        manifest.update(extra)
    atomic_write_text(os.path.join(directory, f"{name}.json"), json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_state(directory, name, grid: Grid | None = None) -> tuple[State, dict]:
    with open(os.path.join(directory, f"{name}.json")) as fh:
        manifest = json.load(fh)
    fields = {}
    for tag in ("nu_plus", "nu_minus", "V"):
        fields[tag] = read_field(os.path.join(directory, manifest["fields"][tag]), grid)
    state = State(fields["nu_plus"], fields["nu_minus"], fields["V"], manifest["gauge"])
    return state, manifest


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
