"""Output writers: legacy ASCII VTK unstructured grids and 17-digit CSV tables."""

from __future__ import annotations

import csv

import numpy as np

FMT = "%.17g"


class OutputError(IOError):
    """I/O failure with path context."""


def write_vtk(path, vertices, triangles, point_data=None, cell_data=None, title="hmmflow output"):
    """Legacy ASCII VTK v3.0 unstructured grid with optional scalar fields."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    try:
        with open(path, "w") as f:
            f.write("# vtk DataFile Version 3.0\n")
            f.write(title[:255] + "\n")
            f.write("ASCII\n")
            f.write("DATASET UNSTRUCTURED_GRID\n")
            f.write("POINTS %d double\n" % len(vertices))
            for p in vertices:
                f.write("%s %s 0\n" % (FMT % p[0], FMT % p[1]))
            f.write("CELLS %d %d\n" % (len(triangles), 4 * len(triangles)))
            for t in triangles:
                f.write("3 %d %d %d\n" % (t[0], t[1], t[2]))
            f.write("CELL_TYPES %d\n" % len(triangles))
            f.write("5\n" * len(triangles))
            if point_data:
                f.write("POINT_DATA %d\n" % len(vertices))
                for name, values in point_data.items():
                    _write_field(f, name, values)
            if cell_data:
                f.write("CELL_DATA %d\n" % len(triangles))
                for name, values in cell_data.items():
                    _write_field(f, name, values)
    except OSError as exc:
        raise OutputError("failed writing VTK file %s: %s" % (path, exc)) from exc


def _write_field(f, name, values):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        f.write("SCALARS %s double 1\n" % name)
        f.write("LOOKUP_TABLE default\n")
        for v in values:
            f.write((FMT % v) + "\n")
    elif values.ndim == 2 and values.shape[1] == 2:
        f.write("VECTORS %s double\n" % name)
        for v in values:
            f.write("%s %s 0\n" % (FMT % v[0], FMT % v[1]))
    else:
        raise OutputError("unsupported field shape %s for %s" % (values.shape, name))


def write_csv(path, header, rows):
    """CSV with an RFC-4180 writer; floats rendered at 17 significant digits."""
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OutputError("failed writing CSV file %s: %s" % (path, exc)) from exc


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return FMT % v
    return v


def read_csv(path):
    """Header and string rows of a CSV file (floats parse exactly from %.17g)."""
    try:
        with open(path, "r", newline="") as f:
            r = csv.reader(f)
            header = next(r)
            rows = [row for row in r if row]
        return header, rows
    except OSError as exc:
        raise OutputError("failed reading CSV file %s: %s" % (path, exc)) from exc


def write_state_vtk(path, mesh, state, model=None):
    """Snapshot of a state; phase-form states also emit the derived fields."""
    if state.formulation == "phases":
        data = {"s_w": state.S, "p_w": state.P}
        if model is not None:
            data["s_n"] = 1.0 - state.S
            data["p_n"] = state.P + model.pc(state.S)
        title = "phase state t=%.12g" % state.t
    else:
        data = {"S": state.S, "P": state.P}
        title = "kirchhoff state t=%.12g" % state.t
    write_vtk(path, mesh.vertices, mesh.triangles, point_data=data, title=title)


def write_tensor_csv(path, mesh, tensors):
    """Effective tensor field table: position, components, bounds, micro residual."""
    rows = []
    for i in range(mesh.n_vertices):
        K = tensors.tensors[i]
        rows.append(
            (
                mesh.vertices[i, 0],
                mesh.vertices[i, 1],
                K[0, 0],
                K[0, 1],
                K[1, 1],
                tensors.alpha_loc[i],
                tensors.beta_loc[i],
                tensors.jump_m[i],
            )
        )
    write_csv(path, ["x", "y", "K11", "K12", "K22", "alpha_loc", "beta_loc", "m_indicator"], rows)


def write_tensor_vtk(path, mesh, tensors):
    write_vtk(
        path,
        mesh.vertices,
        mesh.triangles,
        point_data={
            "K11": tensors.tensors[:, 0, 0],
            "K12": tensors.tensors[:, 0, 1],
            "K22": tensors.tensors[:, 1, 1],
            "alpha_loc": tensors.alpha_loc,
            "beta_loc": tensors.beta_loc,
            "m_indicator": tensors.jump_m,
        },
        title="effective tensor field",
    )


def write_flux_vtk(path, mesh, u_s, u_p):
    """Barycenter values of the reconstructed fluxes as cell vectors."""
    bary = mesh.vertices[mesh.triangles].mean(axis=1)
    pts = bary[:, None, :]
    us_vals = u_s.eval_all(pts)[:, 0, :]
    up_vals = u_p.eval_all(pts)[:, 0, :]
    write_vtk(
        path,
        mesh.vertices,
        mesh.triangles,
        cell_data={"u_s": us_vals, "u_p": up_vals},
        title="flux reconstructions",
    )


def write_runlog_csv(path, log_rows):
    header = ["step", "t", "dt", "newton_iters", "residual_s", "residual_p", "clip_extent"]
    rows = [
        (
            r["step"],
            r["t"],
            r["dt"],
            r["newton_iters"],
            r["residual_s"],
            r["residual_p"],
            r["clip_extent"],
        )
        for r in log_rows
    ]
    write_csv(path, header, rows)


def write_adapt_trace_csv(path, trace_rows):
    header = ["cycle", "n_triangles", "n_cellsolves_new", "aggregate_before", "aggregate_after"]
    write_csv(path, header, trace_rows)
