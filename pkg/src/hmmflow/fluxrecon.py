"""Locally conservative lowest-order flux reconstructions on the coarse mesh.

One normal-flux degree of freedom per coarse edge (lowest-order face
element). Degrees of freedom start from the scheme's averaged edge fluxes
and are corrected by the smallest change that makes every interior dual-cell
divergence identity hold exactly: the saturation flux balances the discrete
time increment, the total flux is divergence free. The correction solves a
small SPD system assembled from mesh geometry only, so its factorization is
shared by both fluxes and all time steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import linalg
from .mesh import p1_gradients


class ReconstructionError(RuntimeError):
    """Raised when reconstruction preconditions fail (non-converged input state)."""


@dataclass
class FluxField:
    """Face-element vector field: one normal-flux DOF per coarse-mesh edge.

    ``q[e]`` is the total flux across edge ``e`` along its canonical normal
    (the edge vector from the lower to the higher vertex id, rotated by -90
    degrees). Piecewise constant in time over its step interval.
    """

    context: object
    q: np.ndarray

    def divergence(self):
        """Per-triangle divergence: (sum of outward-signed edge DOFs) / area."""
        ctx = self.context
        return (self.q[ctx.tri_edge] * ctx.tri_sign).sum(axis=1) / ctx.areas

    def eval(self, tri, points):
        """Evaluate the field inside triangle ``tri`` at the given points."""
        ctx = self.context
        points = np.atleast_2d(np.asarray(points, dtype=float))
        corners = ctx.mesh.vertices[ctx.mesh.triangles[tri]]
        lam = _barycentric(corners, points)
        if np.any(lam < -1e-12) or np.any(lam > 1.0 + 1e-12):
            raise ReconstructionError("evaluation point outside triangle %d" % tri)
        area = ctx.areas[tri]
        out = np.zeros_like(points)
        for k in range(3):
            coef = ctx.tri_sign[tri, k] * self.q[ctx.tri_edge[tri, k]] / (2.0 * area)
            out += coef * (points - corners[k])
        return out[0] if out.shape[0] == 1 else out

    def eval_all(self, points_per_tri):
        """Vectorized evaluation at (nt, npts, 2) points lying in their triangles."""
        ctx = self.context
        coef = ctx.tri_sign * self.q[ctx.tri_edge] / (2.0 * ctx.areas)[:, None]  # (nt,3)
        corners = ctx.mesh.vertices[ctx.mesh.triangles]  # (nt,3,2)
        rel = points_per_tri[:, None, :, :] - corners[:, :, None, :]  # (nt,3,npts,2)
        return np.einsum("tk,tkpd->tpd", coef, rel)


def _barycentric(corners, points):
    T = np.column_stack([corners[1] - corners[0], corners[2] - corners[0]])
    sol = np.linalg.solve(T, (points - corners[0]).T).T
    return np.column_stack([1.0 - sol.sum(axis=1), sol])


class ReconstructionContext:
    """Mesh-only geometry for face-element fields and the conservation correction."""

    def __init__(self, mesh):
        self.mesh = mesh
        _, self.areas = p1_gradients(mesh.vertices[mesh.triangles])
        self.edges = mesh.edges
        ne = len(self.edges)
        nv = mesh.n_vertices
        nt = mesh.n_triangles

        # edge opposite each local vertex, and its outward orientation sign
        self.tri_edge = np.empty((nt, 3), dtype=np.int64)
        self.tri_sign = np.empty((nt, 3))
        verts = mesh.vertices
        for k in range(3):
            # local edge (k+1, k+2) is opposite local vertex k; mesh.tri_edges
            # stores edge (k, k+1) at slot k, so the opposite edge sits at slot k+1
            self.tri_edge[:, k] = mesh.tri_edges[:, (k + 1) % 3]
        for k in range(3):
            e = self.tri_edge[:, k]
            a, b = self.edges[e, 0], self.edges[e, 1]
            normal = _rot(verts[b] - verts[a])
            mid = 0.5 * (verts[a] + verts[b])
            c = mesh.triangles[:, k]
            self.tri_sign[:, k] = np.sign(
                np.einsum("td,td->t", normal, mid - verts[c])
            )

        interior = mesh.interior_vertices
        self.interior = interior
        row_of = -np.ones(nv, dtype=np.int64)
        row_of[interior] = np.arange(len(interior))
        rows, cols, vals = [], [], []
        for k in range(3):
            c = mesh.triangles[:, k]
            keep = row_of[c] >= 0
            rows.append(row_of[c[keep]])
            cols.append(self.tri_edge[keep, k])
            vals.append(self.tri_sign[keep, k] / 3.0)
        self.B = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(interior), ne),
        )
        self._bbt = linalg.SparseMatrix(self.B @ self.B.T, symmetric=True)

        # mean dual-cell tensor and incident triangles per edge, for seed fluxes
        self.edge_tris = [list(ts) for ts in mesh.edge_tris]
        self.edge_normal = _rot(verts[self.edges[:, 1]] - verts[self.edges[:, 0]])

    def constrained_fit(self, q0, targets):
        """Smallest correction of q0 meeting the interior divergence targets."""
        rhs = targets - self.B @ q0
        mu = self._bbt.factorization.solve(rhs)
        q = q0 + self.B.T @ mu
        res = np.abs(self.B @ q - targets).max() if len(targets) else 0.0
        scale = max(1.0, np.abs(targets).max(initial=0.0), np.abs(self.B @ q0).max(initial=0.0))
        if res > 1e-10 * scale:
            raise linalg.LinearSolveError("conservation correction residual %.3e" % res)
        return q

    def cell_divergence(self, q):
        """Integral of the field divergence over each interior dual cell."""
        return self.B @ q


def _rot(v):
    return np.stack([v[..., 1], -v[..., 0]], axis=-1)


def get_context(op):
    if op._recon_factor is None:
        op._recon_factor = ReconstructionContext(op.mesh)
    return op._recon_factor


def _flow_vectors(op, S, P):
    """Per-triangle flow functions (same convention as the estimators)."""
    from .estimators import flow_functions

    flows = flow_functions(op, S, P)
    return flows.V_s, flows.V_p


def _seed_fluxes(op, ctx, V, scale):
    """Averaged flux of -K0 V across each edge, as seed edge DOFs."""
    tensors = op.tensors.tensors
    Kbar = 0.5 * (tensors[ctx.edges[:, 0]] + tensors[ctx.edges[:, 1]])
    Vbar = np.empty((len(ctx.edges), 2))
    for e, ts in enumerate(ctx.edge_tris):
        Vbar[e] = V[ts].mean(axis=0)
    flux_vec = -scale * np.einsum("eij,ej->ei", Kbar, Vbar)
    return np.einsum("ed,ed->e", flux_vec, ctx.edge_normal)


def reconstruct(op, state, prev, dt, check="kirchhoff", check_tol=1e-7):
    """Conservative flux pair (u_s, u_p) for one converged time step.

    Raises :class:`ReconstructionError` when the interior residuals of the
    step exceed ``check_tol`` (scaled): the divergence identities are only
    meaningful for converged states. Pass ``check=None`` to skip.
    """
    if check is not None:
        _refuse_unconverged(op, state, prev, dt, check, check_tol)
    ctx = get_context(op)
    if state.formulation == "phases":
        S = state.S
        P = state.P + op.model.gw(state.S)
    else:
        S, P = state.S, state.P
    V_s, V_p = _flow_vectors(op, S, P)

    dsdt = op.cell_integrate_p1((state.S - prev.S) / dt)
    q0_s = _seed_fluxes(op, ctx, V_s, 1.0 / op.model.phi0)
    u_s = FluxField(ctx, ctx.constrained_fit(q0_s, -dsdt[ctx.interior]))
    q0_p = _seed_fluxes(op, ctx, V_p, 1.0)
    u_p = FluxField(ctx, ctx.constrained_fit(q0_p, np.zeros(len(ctx.interior))))
    return u_s, u_p


def _refuse_unconverged(op, state, prev, dt, check, check_tol):
    from . import macrofv

    if check == "phases":
        r_w, r_n = macrofv.residual_phases(op, state, prev, dt)
        resid = max(np.abs(r_w).max(initial=0.0), np.abs(r_n).max(initial=0.0))
    else:
        r_s, r_p = macrofv.residual_kirchhoff(op, state, prev, dt)
        resid = max(np.abs(r_s).max(initial=0.0), np.abs(r_p).max(initial=0.0))
    scale = max(1.0, float(np.abs(state.S).max()), float(np.abs(state.P).max()))
    if resid > check_tol * scale:
        raise ReconstructionError(
            "state pair is not a converged step (interior residual %.3e)" % resid
        )


def divergence_identities(op, u_s, u_p, state, prev, dt):
    """Residuals of the two conservation identities per interior dual cell."""
    ctx = get_context(op)
    dsdt = op.cell_integrate_p1((state.S - prev.S) / dt)[ctx.interior]
    r_sat = dsdt + ctx.cell_divergence(u_s.q)
    r_tot = ctx.cell_divergence(u_p.q)
    return r_sat, r_tot
