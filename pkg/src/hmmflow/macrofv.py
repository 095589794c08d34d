"""Vertex-centered finite-volume time stepping of the effective two-phase system.

Two formulations share one assembly core: the Kirchhoff/global-pressure form
(unknowns S, P) and the original phase form with per-face upwind mobilities
(unknowns s_w, p_w). Both are implicit Euler in time with damped Newton per
step; each converged step satisfies the interior dual-cell balances to the
solver tolerance.

Interface fluxes are evaluated by the midpoint rule per dual segment. The
per-dual-cell tensors of the two cells sharing a segment enter through their
arithmetic mean, so every face flux is single valued and face antisymmetry
is exact; this keeps the discrete balances conservative, which the flux
reconstruction and the residual estimators rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import linalg
from .mesh import fragment_weights, p1_gradients


class StepFailure(RuntimeError):
    """Newton did not converge even after exhausting time-step halvings."""


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time levels t^0 < ... < t^N."""

    times: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if len(t) < 2 or np.any(np.diff(t) <= 0.0):
            raise ValueError("time grid must be strictly increasing with N >= 1")
        object.__setattr__(self, "times", tuple(float(x) for x in t))

    @classmethod
    def uniform(cls, t_end, n_steps, t_start=0.0):
        return cls(tuple(np.linspace(t_start, t_end, n_steps + 1)))

    @property
    def dts(self):
        t = np.asarray(self.times)
        return np.diff(t)

    @property
    def tau(self):
        return float(self.dts.max())

    @property
    def n_steps(self):
        return len(self.times) - 1


@dataclass
class State:
    """One time level of nodal unknowns.

    Kirchhoff form: (S, P) = saturation and global pressure. Phase form:
    (S, P) = (s_w, p_w); the non-wetting fields follow algebraically.
    """

    t: float
    S: np.ndarray
    P: np.ndarray
    formulation: str = "kirchhoff"
    clip_extent: float = 0.0

    def copy(self):
        return State(self.t, self.S.copy(), self.P.copy(), self.formulation, self.clip_extent)


def phase_outputs(model, state):
    """Non-wetting saturation and pressure derived from a phase-form state."""
    s_n = 1.0 - state.S
    p_n = state.P + model.pc(state.S)
    return s_n, p_n


@dataclass
class NonlinearSolveReport:
    iterations: int = 0
    residual_s: float = np.inf
    residual_p: float = np.inf
    damping: list = field(default_factory=list)
    converged: bool = False
    n_rejections: int = 0
    residual_scale: float = 1.0


@dataclass
class SolverConfig:
    tol: float = 1e-9
    max_iter: int = 30
    max_halvings: int = 10
    picard: bool = False
    damping_ladder: tuple = tuple(0.5 ** k for k in range(7))  # 1 ... 1/64


class MacroOperator:
    """Assembly core binding a dual mesh, an effective tensor field and a fluid model."""

    def __init__(self, dual, tensors, model):
        self.dual = dual
        self.mesh = dual.mesh
        self.tensors = tensors
        self.model = model
        mesh = dual.mesh
        self.nv = mesh.n_vertices
        self.tris = mesh.triangles
        coords = mesh.vertices[mesh.triangles]
        self.grads, self.areas = p1_gradients(coords)

        self.seg_tri = dual.seg_tri
        self.seg_a = dual.seg_a
        self.seg_b = dual.seg_b
        self.seg_normal = dual.seg_normal
        ns = len(self.seg_tri)
        tri_of_seg = self.tris[self.seg_tri]

        # local indices of the segment's two cells and the opposite vertex
        self.loc_a = np.argmax(tri_of_seg == self.seg_a[:, None], axis=1)
        self.loc_b = np.argmax(tri_of_seg == self.seg_b[:, None], axis=1)
        self.loc_c = 3 - self.loc_a - self.loc_b
        # P1 basis values at segment midpoints: 5/12 at the two cells, 2/12 opposite
        self.phi_seg = np.full((ns, 3), 5.0 / 12.0)
        self.phi_seg[np.arange(ns), self.loc_c] = 2.0 / 12.0

        Kbar = 0.5 * (tensors.tensors[self.seg_a] + tensors.tensors[self.seg_b])
        self.Kn = np.einsum("sij,sj->si", Kbar, self.seg_normal)  # symmetric tensors
        self.kng = np.einsum("si,ski->sk", self.Kn, self.grads[self.seg_tri])
        self.kngrav = self.Kn @ model.gravity

        # fragment mass: Mfrag[i, v] = integral over D_i of basis v
        w = fragment_weights()
        rows, cols, vals = [], [], []
        for ki in range(3):
            for kv in range(3):
                rows.append(self.tris[:, ki])
                cols.append(self.tris[:, kv])
                vals.append(self.areas * w[ki, kv])
        self.Mfrag = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.nv, self.nv),
        )

        self.boundary = mesh.boundary_vertices
        self.interior_mask = np.ones(self.nv, dtype=bool)
        self.interior_mask[self.boundary] = False
        self._recon_factor = None  # cached by fluxrecon

    # -- field evaluation helpers -------------------------------------------

    def tri_gradients(self, nodal):
        return np.einsum("ta,tad->td", nodal[self.tris], self.grads)

    def seg_value(self, nodal):
        return np.einsum("sk,sk->s", nodal[self.tris[self.seg_tri]], self.phi_seg)

    def cell_integrate_p1(self, nodal):
        return self.Mfrag @ nodal

    def scatter_out(self, flux):
        out = np.zeros(self.nv)
        np.add.at(out, self.seg_a, flux)
        np.add.at(out, self.seg_b, -flux)
        return out

    def _scatter_jacobian(self, dflux, row_mask):
        """COO pieces for d(-out)/dx from per-segment, per-local-node derivatives."""
        rows, cols, vals = [], [], []
        cols_local = self.tris[self.seg_tri]
        mask_a = row_mask[self.seg_a]
        mask_b = row_mask[self.seg_b]
        for k in range(3):
            rows.append(self.seg_a)
            cols.append(cols_local[:, k])
            vals.append(-dflux[:, k] * mask_a)
            rows.append(self.seg_b)
            cols.append(cols_local[:, k])
            vals.append(dflux[:, k] * mask_b)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    # -- Kirchhoff form -------------------------------------------------------

    def kirchhoff_fluxes(self, S, P):
        """Per-segment saturation and pressure fluxes of the Kirchhoff scheme."""
        model = self.model
        gradP = self.tri_gradients(P)[self.seg_tri]
        gradU = self.tri_gradients(model.kirchhoff(S))[self.seg_tri]
        S_m = self.seg_value(S)
        lw = model.lam_w(S_m)
        ln = model.lam_n(S_m)
        gw_flux = np.einsum("si,i->s", self.Kn, model.gravity * model.rho_w)
        gmix = self.kngrav
        knP = np.einsum("si,si->s", self.Kn, gradP)
        knU = np.einsum("si,si->s", self.Kn, gradU)
        flux_s = lw * knP + knU - lw * gw_flux
        flux_p = (lw + ln) * knP - (lw * model.rho_w + ln * model.rho_n) * gmix
        return flux_s, flux_p

    def residual_kirchhoff_full(self, S, P, S_old, dt, sbar, pbar):
        model = self.model
        flux_s, flux_p = self.kirchhoff_fluxes(S, P)
        acc = model.phi0 * self.cell_integrate_p1((S - S_old) / dt)
        r_s = acc - self.scatter_out(flux_s)
        r_p = -self.scatter_out(flux_p)
        r_s[self.boundary] = S[self.boundary] - sbar
        r_p[self.boundary] = P[self.boundary] - pbar
        return r_s, r_p

    def jacobian_kirchhoff(self, S, P, dt, picard=False):
        model = self.model
        seg_tris = self.tris[self.seg_tri]
        gradP = self.tri_gradients(P)[self.seg_tri]
        S_m = self.seg_value(S)
        lw = model.lam_w(S_m)
        ln = model.lam_n(S_m)
        dlw = model.dlam_w(S_m)
        dln = model.dlam_n(S_m)
        dups = model.dkirchhoff(S[seg_tris])  # Upsilon'(S_k) per local node
        knP = np.einsum("si,si->s", self.Kn, gradP)
        gw_flux = np.einsum("si,i->s", self.Kn, model.gravity * model.rho_w)
        gmix = self.kngrav

        # d flux_s / dS_k and / dP_k, shape (ns, 3)
        df_s_dS = dups * self.kng
        df_s_dP = lw[:, None] * self.kng
        df_p_dS = np.zeros_like(df_s_dS)
        df_p_dP = (lw + ln)[:, None] * self.kng
        if not picard:
            coef = dlw * (knP - gw_flux)
            df_s_dS = df_s_dS + coef[:, None] * self.phi_seg
            coefp = (dlw + dln) * knP - (dlw * model.rho_w + dln * model.rho_n) * gmix
            df_p_dS = df_p_dS + coefp[:, None] * self.phi_seg

        mask = self.interior_mask.astype(float)
        rs, cs, vs = self._scatter_jacobian(df_s_dS, mask)
        rp, cp, vp = self._scatter_jacobian(df_s_dP, mask)
        rps, cps, vps = self._scatter_jacobian(df_p_dS, mask)
        rpp, cpp, vpp = self._scatter_jacobian(df_p_dP, mask)

        acc = (model.phi0 / dt) * self.Mfrag
        acc = sp.diags(mask) @ acc
        J_ss = sp.csr_matrix((vs, (rs, cs)), shape=(self.nv, self.nv)) + acc
        J_sp = sp.csr_matrix((vp, (rp, cp)), shape=(self.nv, self.nv))
        J_ps = sp.csr_matrix((vps, (rps, cps)), shape=(self.nv, self.nv))
        J_pp = sp.csr_matrix((vpp, (rpp, cpp)), shape=(self.nv, self.nv))
        eye_b = sp.diags((~self.interior_mask).astype(float))
        return sp.bmat([[J_ss + eye_b, J_sp], [J_ps, J_pp + eye_b]], format="csr")

    # -- phase form ------------------------------------------------------------

    def phase_potentials(self, s, p_w):
        """Per-segment phase potentials (mobility-free flux factors)."""
        model = self.model
        gradPw = self.tri_gradients(p_w)[self.seg_tri]
        gradPc = self.tri_gradients(model.pc(s))[self.seg_tri]
        grav_w = np.einsum("si,i->s", self.Kn, model.gravity * model.rho_w)
        grav_n = np.einsum("si,i->s", self.Kn, model.gravity * model.rho_n)
        pot_w = np.einsum("si,si->s", self.Kn, gradPw) - grav_w
        pot_n = np.einsum("si,si->s", self.Kn, gradPw + gradPc) - grav_n
        return pot_w, pot_n

    def upwind_nodes(self, pot):
        """Upwind vertex per segment: the cell the phase flows out of.

        Flow runs from a to b when the potential is negative; ties pick the
        lower vertex index.
        """
        tie = np.minimum(self.seg_a, self.seg_b)
        return np.where(pot < 0.0, self.seg_a, np.where(pot > 0.0, self.seg_b, tie))

    def phase_fluxes(self, s, p_w):
        model = self.model
        pot_w, pot_n = self.phase_potentials(s, p_w)
        up_w = self.upwind_nodes(pot_w)
        up_n = self.upwind_nodes(pot_n)
        flux_w = model.lam_w(s[up_w]) * pot_w
        flux_n = model.lam_n(s[up_n]) * pot_n
        return flux_w, flux_n, up_w, up_n

    def residual_phases_full(self, s, p_w, s_old, dt, sbar, pwbar):
        model = self.model
        flux_w, flux_n, _, _ = self.phase_fluxes(s, p_w)
        acc = model.phi0 * self.cell_integrate_p1((s - s_old) / dt)
        r_w = acc - self.scatter_out(flux_w)
        r_n = -acc - self.scatter_out(flux_n)
        r_w[self.boundary] = s[self.boundary] - sbar
        r_n[self.boundary] = p_w[self.boundary] - pwbar
        return r_w, r_n

    def jacobian_phases(self, s, p_w, dt, picard=False):
        model = self.model
        seg_tris = self.tris[self.seg_tri]
        pot_w, pot_n = self.phase_potentials(s, p_w)
        up_w = self.upwind_nodes(pot_w)
        up_n = self.upwind_nodes(pot_n)
        lw_up = model.lam_w(s[up_w])
        ln_up = model.lam_n(s[up_n])
        dpc_k = model.dpc(s[seg_tris])

        sel_w = (seg_tris == up_w[:, None]).astype(float)
        sel_n = (seg_tris == up_n[:, None]).astype(float)
        df_w_ds = lw_up[:, None] * 0.0
        if not picard:
            df_w_ds = (model.dlam_w(s[up_w]) * pot_w)[:, None] * sel_w
        dpot_n_ds = dpc_k * self.kng
        df_n_ds = ln_up[:, None] * dpot_n_ds
        if not picard:
            df_n_ds = df_n_ds + (model.dlam_n(s[up_n]) * pot_n)[:, None] * sel_n
        df_w_dp = lw_up[:, None] * self.kng
        df_n_dp = ln_up[:, None] * self.kng

        mask = self.interior_mask.astype(float)
        rw, cw, vw = self._scatter_jacobian(df_w_ds, mask)
        rwp, cwp, vwp = self._scatter_jacobian(df_w_dp, mask)
        rn, cn, vn = self._scatter_jacobian(df_n_ds, mask)
        rnp, cnp, vnp = self._scatter_jacobian(df_n_dp, mask)

        acc = (model.phi0 / dt) * self.Mfrag
        acc = sp.diags(mask) @ acc
        J_ww = sp.csr_matrix((vw, (rw, cw)), shape=(self.nv, self.nv)) + acc
        J_wp = sp.csr_matrix((vwp, (rwp, cwp)), shape=(self.nv, self.nv))
        J_nw = sp.csr_matrix((vn, (rn, cn)), shape=(self.nv, self.nv)) - acc
        J_np = sp.csr_matrix((vnp, (rnp, cnp)), shape=(self.nv, self.nv))
        eye_b = sp.diags((~self.interior_mask).astype(float))
        return sp.bmat([[J_ww + eye_b, J_wp], [J_nw, J_np + eye_b]], format="csr")


# -- public residual wrappers (interior dual cells) ---------------------------


def residual_kirchhoff(op, state, prev, dt, sbar=None, pbar=None):
    """Interior dual-cell residual pair of the Kirchhoff scheme at ``state``."""
    if sbar is None:
        sbar = state.S[op.boundary]
    if pbar is None:
        pbar = state.P[op.boundary]
    r_s, r_p = op.residual_kirchhoff_full(state.S, state.P, prev.S, dt, sbar, pbar)
    return r_s[op.interior_mask], r_p[op.interior_mask]


def residual_phases(op, state, prev, dt, sbar=None, pwbar=None):
    """Interior dual-cell phase balances of the upwind scheme at ``state``."""
    if sbar is None:
        sbar = state.S[op.boundary]
    if pwbar is None:
        pwbar = state.P[op.boundary]
    r_w, r_n = op.residual_phases_full(state.S, state.P, prev.S, dt, sbar, pwbar)
    return r_w[op.interior_mask], r_n[op.interior_mask]


# -- Newton driver ------------------------------------------------------------


def _newton(residual_fn, jacobian_fn, x0, nv, cfg):
    x = x0.copy()
    report = NonlinearSolveReport()
    r = residual_fn(x)
    scale = max(1.0, float(np.abs(r).max()))
    report.residual_scale = scale
    for _ in range(cfg.max_iter):
        rinf = float(np.abs(r).max())
        report.residual_s = float(np.abs(r[:nv]).max())
        report.residual_p = float(np.abs(r[nv:]).max())
        if rinf <= cfg.tol * scale:
            report.converged = True
            return x, report
        J = jacobian_fn(x)
        try:
            delta = linalg.solve_general(J, -r, tol=1e-8)
        except linalg.LinearSolveError:
            report.converged = False
            return x, report
        rnorm = np.linalg.norm(r)
        accepted = False
        for theta in cfg.damping_ladder:
            x_try = x + theta * delta
            r_try = residual_fn(x_try)
            if np.linalg.norm(r_try) < rnorm * (1.0 - 1e-4 * theta) or np.abs(
                r_try
            ).max() <= cfg.tol * scale:
                x, r = x_try, r_try
                report.damping.append(theta)
                report.iterations += 1
                accepted = True
                break
        if not accepted:
            report.converged = False
            return x, report
    report.residual_s = float(np.abs(r[:nv]).max())
    report.residual_p = float(np.abs(r[nv:]).max())
    report.converged = bool(np.abs(r).max() <= cfg.tol * scale)
    return x, report


def _clip_extent(S, interior_mask):
    si = S[interior_mask] if interior_mask.any() else S
    return float(max(0.0, -si.min(initial=0.0), si.max(initial=1.0) - 1.0))


def _single_step(op, prev, t_new, bdata, cfg, formulation):
    nv = op.nv
    dt = t_new - prev.t
    bpts = op.mesh.vertices[op.boundary]
    sbar = bdata.sbar_at(bpts, t_new)
    if formulation == "kirchhoff":
        pbar = bdata.pbar_at(bpts, t_new)
        resf = lambda x: np.concatenate(
            op.residual_kirchhoff_full(x[:nv], x[nv:], prev.S, dt, sbar, pbar)
        )
        jacf = lambda x: op.jacobian_kirchhoff(x[:nv], x[nv:], dt, cfg.picard)
    else:
        pwbar = bdata.pbar_at(bpts, t_new) - op.model.gw(sbar)
        resf = lambda x: np.concatenate(
            op.residual_phases_full(x[:nv], x[nv:], prev.S, dt, sbar, pwbar)
        )
        jacf = lambda x: op.jacobian_phases(x[:nv], x[nv:], dt, cfg.picard)
    x0 = np.concatenate([prev.S, prev.P])
    x0[op.boundary] = sbar
    x0[nv + op.boundary] = pbar if formulation == "kirchhoff" else pwbar
    x, report = _newton(resf, jacf, x0, nv, cfg)
    state = State(
        t=t_new,
        S=x[:nv],
        P=x[nv:],
        formulation=formulation,
        clip_extent=_clip_extent(x[:nv], op.interior_mask),
    )
    return state, report


def _advance(op, prev, t_new, bdata, cfg, formulation, depth=0):
    state, report = _single_step(op, prev, t_new, bdata, cfg, formulation)
    if report.converged:
        return state, report
    if depth >= cfg.max_halvings:
        raise StepFailure(
            "step to t=%.6g failed after %d halvings (residual %.3e)"
            % (t_new, depth, max(report.residual_s, report.residual_p))
        )
    t_mid = 0.5 * (prev.t + t_new)
    mid_state, rep1 = _advance(op, prev, t_mid, bdata, cfg, formulation, depth + 1)
    end_state, rep2 = _advance(op, mid_state, t_new, bdata, cfg, formulation, depth + 1)
    rep2.iterations += rep1.iterations
    rep2.n_rejections = rep1.n_rejections + rep2.n_rejections + 1
    rep2.damping = rep1.damping + rep2.damping
    return end_state, rep2


def step_kirchhoff(op, prev, t_new, bdata, cfg=None):
    """Advance the Kirchhoff-form state to ``t_new`` (halving dt on Newton failure)."""
    return _advance(op, prev, t_new, bdata, cfg or SolverConfig(), "kirchhoff")


def step_phases(op, prev, t_new, bdata, cfg=None):
    """Advance the phase-form state to ``t_new`` (halving dt on Newton failure)."""
    return _advance(op, prev, t_new, bdata, cfg or SolverConfig(), "phases")


def initial_pressure(op, S0, pbar0):
    """Global pressure solving the pressure block for the given initial saturation."""
    nv = op.nv
    zero = np.zeros(nv)
    _, r_p = op.residual_kirchhoff_full(S0, zero, S0, 1.0, S0[op.boundary], pbar0)
    J = op.jacobian_kirchhoff(S0, zero, 1.0)
    J_pp = J[nv:, nv:]
    return linalg.solve_general(J_pp, -r_p, tol=1e-10)


def initial_state(op, bdata, t0=0.0, formulation="kirchhoff"):
    """Materialize the initial state; the pressure solves the pressure block for S0."""
    verts = op.mesh.vertices
    S0 = bdata.s0_at(verts)
    pbar0 = bdata.pbar_at(verts[op.boundary], t0)
    if formulation == "kirchhoff":
        P0 = initial_pressure(op, S0, pbar0)
    else:
        Pglob = initial_pressure(op, S0, pbar0)
        P0 = Pglob - op.model.gw(S0)
    return State(t=t0, S=S0, P=P0, formulation=formulation)


@dataclass
class RunResult:
    states: list
    reports: list
    log_rows: list
    dual: object = None
    tensors: object = None


def run(op, bdata, grid, formulation="kirchhoff", cfg=None, snapshot_cb=None):
    """March the scheme over the time grid, collecting states and a run log."""
    cfg = cfg or SolverConfig()
    state = initial_state(op, bdata, grid.times[0], formulation)
    states = [state]
    reports = []
    log_rows = []
    if snapshot_cb is not None:
        snapshot_cb(0, state)
    step = {"kirchhoff": step_kirchhoff, "phases": step_phases}[formulation]
    for n in range(1, grid.n_steps + 1):
        t_new = grid.times[n]
        dt = t_new - states[-1].t
        state, report = step(op, states[-1], t_new, bdata, cfg)
        states.append(state)
        reports.append(report)
        log_rows.append(
            {
                "step": n,
                "t": t_new,
                "dt": dt,
                "newton_iters": report.iterations,
                "residual_s": report.residual_s,
                "residual_p": report.residual_p,
                "clip_extent": state.clip_extent,
            }
        )
        if snapshot_cb is not None:
            snapshot_cb(n, state)
    return RunResult(states=states, reports=reports, log_rows=log_rows, dual=op.dual, tensors=op.tensors)
