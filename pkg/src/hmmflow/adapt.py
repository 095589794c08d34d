"""Estimator-driven spatial adaptivity: bulk marking, refinement mapping, state transfer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mesh as meshmod
from .macrofv import State


class AdaptError(ValueError):
    """Raised for invalid marking input or unrelated transfer meshes."""


@dataclass(frozen=True)
class AdaptPolicy:
    """Bulk (Doerfler) marking policy over dual-cell indicators."""

    theta_mark: float = 0.5
    max_generations: int = 30
    cadence: str = "per-run"  # or "per-step"
    families: tuple = ("cr", "cf", "df", "app")

    def __post_init__(self):
        if not (0.0 < self.theta_mark <= 1.0):
            raise AdaptError("theta_mark must lie in (0, 1]")
        if self.cadence not in ("per-run", "per-step"):
            raise AdaptError("cadence must be 'per-run' or 'per-step'")


def mark_cells(values, theta):
    """Smallest cell set whose squared-indicator sum reaches theta * total."""
    values = np.asarray(values, dtype=float)
    total = values.sum()
    if total <= 0.0:
        return np.array([], dtype=np.int64)
    order = np.argsort(values, kind="stable")[::-1]
    csum = np.cumsum(values[order])
    # first prefix reaching the bulk fraction (tolerate roundoff at the top)
    k = int(np.searchsorted(csum, theta * total - 1e-12 * total)) + 1
    return np.sort(order[:k])


def mark(report, n, policy, mesh):
    """Marked triangle set: the star of every vertex picked by bulk marking.

    ``n`` selects one time step of the report; ``None`` aggregates all steps.
    """
    if not report.steps:
        raise AdaptError("estimator report is empty")
    values = report.cell_functional(n, policy.families)
    cells = mark_cells(values, policy.theta_mark)
    tris = set()
    vertex_tris = mesh.vertex_triangles()
    for c in cells:
        tris.update(vertex_tris[int(c)])
    return np.array(sorted(tris), dtype=np.int64)


def _locate(points, mesh, tol=1e-10):
    """Containing triangle and barycentric coordinates for each point."""
    verts = mesh.vertices
    tris = mesh.triangles
    p = verts[tris]
    nt = len(tris)
    found_tri = -np.ones(len(points), dtype=np.int64)
    found_bary = np.zeros((len(points), 3))
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    remaining = np.arange(len(points))
    for t in range(nt):
        if len(remaining) == 0:
            break
        rel = points[remaining] - p[t, 0]
        l1 = (rel[:, 0] * d2[t, 1] - rel[:, 1] * d2[t, 0]) / det[t]
        l2 = (d1[t, 0] * rel[:, 1] - d1[t, 1] * rel[:, 0]) / det[t]
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        hit = remaining[inside]
        found_tri[hit] = t
        found_bary[hit, 0] = l0[inside]
        found_bary[hit, 1] = l1[inside]
        found_bary[hit, 2] = l2[inside]
        remaining = remaining[~inside]
    if np.any(found_tri < 0):
        raise AdaptError("transfer failed: %d points outside the old mesh" % (found_tri < 0).sum())
    return found_tri, found_bary


def transfer(state, old_mesh, new_mesh, bdata=None, model=None):
    """P1 interpolation of a state onto a refined mesh.

    Boundary nodes are reset to the exact traces when boundary data is given
    (the phase form needs the fluid model to invert the global pressure).
    """
    tri, bary = _locate(new_mesh.vertices, old_mesh)
    tnodes = old_mesh.triangles[tri]
    S = np.einsum("na,na->n", bary, state.S[tnodes])
    P = np.einsum("na,na->n", bary, state.P[tnodes])
    if bdata is not None:
        bnd = new_mesh.boundary_vertices
        bpts = new_mesh.vertices[bnd]
        S[bnd] = bdata.sbar_at(bpts, state.t)
        pbar = bdata.pbar_at(bpts, state.t)
        if state.formulation == "phases":
            if model is None:
                raise AdaptError("phase-form transfer needs the fluid model")
            P[bnd] = pbar - model.gw(S[bnd])
        else:
            P[bnd] = pbar
    return State(t=state.t, S=S, P=P, formulation=state.formulation, clip_extent=state.clip_extent)


def refine_marked(mesh, marked):
    """Refinement wrapper kept here for the adaptive loop's readability."""
    return meshmod.refine(mesh, marked)
