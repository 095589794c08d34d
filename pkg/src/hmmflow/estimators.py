"""A posteriori error indicators per dual cell and time step, and their aggregate.

Families: coarse-scale residual (CR), fine-scale cell residual (CF),
diffusive flux (DF), coefficient approximation (APP), and the optional
modeling indicator (MOD) available when an analytic homogenized tensor is
known. Space integrals run over dual-cell fragments with a 3-point midpoint
rule per sub-triangle (exact for the quadratic integrands at hand); time
integrals over each step use the midpoint rule with the time-linear nodal
fields evaluated halfway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import linalg

FMT = "%.17g"


@dataclass
class FlowFunctions:
    """Per-triangle piecewise-constant flow functions of a (S, P) state."""

    V_s: np.ndarray
    V_p: np.ndarray


def flow_functions(op, S, P):
    """Flow functions with barycenter mobilities and P1 gradients."""
    model = op.model
    S_bary = S[op.tris].mean(axis=1)
    gradP = op.tri_gradients(P)
    gradU = op.tri_gradients(model.kirchhoff(S))
    lw = model.lam_w(S_bary)
    ln = model.lam_n(S_bary)
    g = model.gravity
    V_s = lw[:, None] * gradP + gradU - np.outer(lw * model.rho_w, g)
    V_p = (lw + ln)[:, None] * gradP - np.outer(lw * model.rho_w + ln * model.rho_n, g)
    return FlowFunctions(V_s=V_s, V_p=V_p)


class EstimatorContext:
    """Fragment quadrature and per-cell scatter for one coarse mesh."""

    def __init__(self, op):
        self.op = op
        mesh = op.mesh
        corners = mesh.vertices[mesh.triangles]  # (nt,3,2)
        # barycentric coordinates of the 6 quadrature points of the local-0
        # fragment (two sub-triangles, midpoint rule each)
        base = np.array(
            [
                [3.0 / 4.0, 1.0 / 4.0, 0.0],
                [5.0 / 12.0, 5.0 / 12.0, 1.0 / 6.0],
                [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
                [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
                [5.0 / 12.0, 1.0 / 6.0, 5.0 / 12.0],
                [3.0 / 4.0, 0.0, 1.0 / 4.0],
            ]
        )
        self.bary = np.empty((3, 6, 3))
        for k in range(3):
            perm = [(0 + k) % 3, (1 + k) % 3, (2 + k) % 3]
            self.bary[k][:, perm] = base
        # physical points per (tri, local k, quad point)
        self.qpts = np.einsum("kqa,tad->tkqd", self.bary, corners)
        self.qw = np.repeat(op.areas[:, None, None] / 18.0, 6, axis=2)
        self.qw = np.broadcast_to(self.qw, (mesh.n_triangles, 3, 6)).copy()

    def cell_scatter(self, per_tri_local):
        """Sum (nt, 3) fragment contributions into their owning dual cells."""
        out = np.zeros(self.op.nv)
        for k in range(3):
            np.add.at(out, self.op.tris[:, k], per_tri_local[:, k])
        return out

    def vnorm2_cells(self, V):
        """Squared L2 norm over each dual cell of a per-triangle-constant field."""
        contrib = (V ** 2).sum(axis=1)[:, None] * (self.op.areas[:, None] / 3.0)
        return self.cell_scatter(np.broadcast_to(contrib, (len(V), 3)).copy())


def get_context(op):
    if not hasattr(op, "_estimator_ctx"):
        op._estimator_ctx = EstimatorContext(op)
    return op._estimator_ctx


def eta_cr(op, u_s, u_p, dsdt_nodal):
    """Coarse-scale residual pair (eta_CR_s, eta_CR_p) per dual cell."""
    ctx = get_context(op)
    alpha = op.tensors.alpha_global
    div_s = u_s.divergence()
    div_p = u_p.divergence()
    vals_nodal = dsdt_nodal[op.tris]  # (nt,3)
    per_s = np.empty((op.mesh.n_triangles, 3))
    per_p = np.empty((op.mesh.n_triangles, 3))
    for k in range(3):
        p1_vals = np.einsum("qa,ta->tq", ctx.bary[k], vals_nodal)
        res_s = p1_vals + div_s[:, None]
        per_s[:, k] = (ctx.qw[:, k] * res_s ** 2).sum(axis=1)
        per_p[:, k] = ctx.qw[:, k].sum(axis=1) * div_p ** 2
    norm_s = np.sqrt(ctx.cell_scatter(per_s))
    norm_p = np.sqrt(ctx.cell_scatter(per_p))
    coef = op.dual.C_P * op.dual.H_D / np.sqrt(alpha)
    return coef * norm_s, coef * norm_p


def eta_cf(op, flows):
    """Fine-scale (cell-problem flux jump) residual pair per dual cell."""
    ctx = get_context(op)
    t = op.tensors
    alpha = t.alpha_global
    coef = t.jump_m * (t.beta_loc / t.alpha_loc) / np.sqrt(alpha)
    return (
        coef * np.sqrt(ctx.vnorm2_cells(flows.V_s)),
        coef * np.sqrt(ctx.vnorm2_cells(flows.V_p)),
    )


def eta_app(op, flows):
    """Coefficient-sampling approximation error pair per dual cell."""
    ctx = get_context(op)
    t = op.tensors
    alpha = t.alpha_global
    coef = t.sampling_sup * (t.beta_loc / t.alpha_loc) / np.sqrt(alpha)
    return (
        coef * np.sqrt(ctx.vnorm2_cells(flows.V_s)),
        coef * np.sqrt(ctx.vnorm2_cells(flows.V_p)),
    )


def _eta_df_one(op, ctx, V, u):
    alpha = op.tensors.alpha_global
    tensors = op.tensors.tensors
    per = np.empty((op.mesh.n_triangles, 3))
    for k in range(3):
        cells = op.tris[:, k]
        KV = np.einsum("tij,tj->ti", tensors[cells], V)
        uvals = u.eval_all(ctx.qpts[:, k])  # (nt, 6, 2)
        vec = KV[:, None, :] + uvals
        per[:, k] = (ctx.qw[:, k] * (vec ** 2).sum(axis=2)).sum(axis=1)
    return np.sqrt(ctx.cell_scatter(per)) / np.sqrt(alpha)


def eta_df(op, flows, u_s, u_p):
    """Diffusive-flux estimator pair per dual cell."""
    ctx = get_context(op)
    return _eta_df_one(op, ctx, flows.V_s, u_s), _eta_df_one(op, ctx, flows.V_p, u_p)


def _eta_mod_one(op, ctx, V, exact):
    alpha = op.tensors.alpha_global
    tensors = op.tensors.tensors
    per = np.empty((op.mesh.n_triangles, 3))
    for k in range(3):
        cells = op.tris[:, k]
        acc = np.zeros(op.mesh.n_triangles)
        for q in range(6):
            pts = ctx.qpts[:, k, q]
            Kex = np.array([exact(p) for p in pts])
            diff = np.einsum("tij,tj->ti", Kex - tensors[cells], V)
            acc += ctx.qw[:, k, q] * (diff ** 2).sum(axis=1)
        per[:, k] = acc
    return np.sqrt(ctx.cell_scatter(per)) / np.sqrt(alpha)


def eta_mod(op, flows):
    """Modeling-error pair per dual cell; None when no analytic tensor is known."""
    exact = op.tensors.exact
    if exact is None:
        return None
    ctx = get_context(op)
    return _eta_mod_one(op, ctx, flows.V_s, exact), _eta_mod_one(op, ctx, flows.V_p, exact)


# -- norms shared with the acceptance harness ---------------------------------


def weighted_stiffness(op):
    """P1 stiffness weighted by the per-dual-cell tensors (exact fragment splitting)."""
    mesh = op.mesh
    Kbar = op.tensors.tensors[mesh.triangles].mean(axis=1)  # (nt,2,2)
    Kg = np.einsum("tij,taj->tai", Kbar, op.grads)
    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            rows.append(mesh.triangles[:, a])
            cols.append(mesh.triangles[:, b])
            vals.append(op.areas * np.einsum("td,td->t", op.grads[:, a], Kg[:, b]))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(op.nv, op.nv),
    )


def p1_mass_matrix(mesh, areas):
    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            rows.append(mesh.triangles[:, a])
            cols.append(mesh.triangles[:, b])
            w = areas / (6.0 if a == b else 12.0)
            vals.append(w)
    n = mesh.n_vertices
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def energy_norm(op, nodal):
    """K0-weighted H1 seminorm of a nodal P1 field."""
    A = weighted_stiffness(op)
    return float(np.sqrt(max(nodal @ (A @ nodal), 0.0)))


def dual_norm(op, load):
    """Discrete dual norm of a load vector against the K0-weighted energy norm."""
    A = weighted_stiffness(op).tolil()
    b = np.asarray(load, dtype=float).copy()
    for i in op.boundary:
        A.rows[i] = [i]
        A.data[i] = [1.0]
        b[i] = 0.0
    z = linalg.solve_general(sp.csr_matrix(A), b, tol=1e-10)
    return float(np.sqrt(max(z @ load, 0.0)))


def initial_data_term(op, S0_nodal, s0_callable=None):
    """Squared dual norm of the initial-data mismatch (0 for nodal-exact data)."""
    if s0_callable is None:
        return 0.0
    ctx = get_context(op)
    load = np.zeros(op.nv)
    for k in range(3):
        pts = ctx.qpts[:, k]  # (nt,6,2)
        s_exact = np.array([s0_callable(pts[:, q]) for q in range(6)]).T  # (nt,6)
        s_h = np.einsum("qa,ta->tq", ctx.bary[k], S0_nodal[op.tris])
        phi = np.einsum("qa,ta->tqa", ctx.bary[k], np.ones((op.mesh.n_triangles, 3)))
        mism = (s_h - s_exact)[:, :, None] * phi * ctx.qw[:, k][:, :, None]
        for a in range(3):
            np.add.at(load, op.tris[:, a], mism[:, :, a].sum(axis=1))
    if np.abs(load).max() == 0.0:
        return 0.0
    return dual_norm(op, load) ** 2


# -- report -------------------------------------------------------------------


@dataclass
class EstimatorReport:
    """All indicator values of a run: one row block per time step and phase."""

    steps: list = field(default_factory=list)  # dicts with arrays per family
    initial_term: float = 0.0
    has_mod: bool = False

    def aggregate(self, include_mod=True):
        """Total right-hand side of the a posteriori bound."""
        total = self.initial_term
        for blk in self.steps:
            dt = blk["dt"]
            for ph in ("s", "p"):
                comb = (
                    blk["eta_cr_" + ph]
                    + blk["eta_cf_" + ph]
                    + blk["eta_df_" + ph]
                    + blk["eta_app_" + ph]
                )
                total += dt * float((comb ** 2).sum())
                if include_mod and self.has_mod:
                    total += dt * float((blk["eta_mod_" + ph] ** 2).sum())
        return total

    def family_totals(self):
        out = {}
        for fam in ("cr", "cf", "df", "app", "mod"):
            tot = 0.0
            present = False
            for blk in self.steps:
                for ph in ("s", "p"):
                    key = "eta_%s_%s" % (fam, ph)
                    if key in blk:
                        present = True
                        tot += blk["dt"] * float((blk[key] ** 2).sum())
            if present:
                out[fam] = tot
        return out

    def cell_functional(self, n=None, families=("cr", "cf", "df", "app")):
        """Per-cell squared marking functional, for step n or summed over steps."""
        blocks = self.steps if n is None else [self.steps[n - 1]]
        nv = len(blocks[0]["eta_cr_s"])
        out = np.zeros(nv)
        for blk in blocks:
            for ph in ("s", "p"):
                comb = np.zeros(nv)
                for fam in families:
                    key = "eta_%s_%s" % (fam, ph)
                    if key in blk:
                        comb += blk[key]
                out += blk["dt"] * comb ** 2
        return out

    def spacewise_sums(self):
        """Per-step spatial sum of the squared combined indicator."""
        rows = []
        for blk in self.steps:
            tot = 0.0
            for ph in ("s", "p"):
                comb = (
                    blk["eta_cr_" + ph]
                    + blk["eta_cf_" + ph]
                    + blk["eta_df_" + ph]
                    + blk["eta_app_" + ph]
                )
                tot += blk["dt"] * float((comb ** 2).sum())
            rows.append((blk["n"], tot))
        return rows

    # CSV round trip: columns fixed by the external interface
    CSV_HEADER = ["n", "t", "cell", "alpha_phase", "eta_CR", "eta_CF", "eta_DF", "eta_APP", "eta_MOD_or_NA"]

    def to_csv(self, path_or_buf):
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            f = open(path_or_buf, "w", newline="")
            close = True
        else:
            f = path_or_buf
        try:
            f.write(",".join(self.CSV_HEADER) + "\r\n")
            for blk in self.steps:
                nv = len(blk["eta_cr_s"])
                for ph in ("s", "p"):
                    for cell in range(nv):
                        mod = (
                            FMT % blk["eta_mod_" + ph][cell] if self.has_mod else "NA"
                        )
                        f.write(
                            "%d,%s,%d,%s,%s,%s,%s,%s,%s\r\n"
                            % (
                                blk["n"],
                                FMT % blk["t_mid"],
                                cell,
                                ph,
                                FMT % blk["eta_cr_" + ph][cell],
                                FMT % blk["eta_cf_" + ph][cell],
                                FMT % blk["eta_df_" + ph][cell],
                                FMT % blk["eta_app_" + ph][cell],
                                mod,
                            )
                        )
        finally:
            if close:
                f.close()

    @classmethod
    def from_csv(cls, path_or_buf, dts, initial_term=0.0):
        """Rebuild a report from its CSV serialization (same dt per step required)."""
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            f = open(path_or_buf, "r", newline="")
            close = True
        else:
            f = path_or_buf
        try:
            header = f.readline().strip().split(",")
            if header != cls.CSV_HEADER:
                raise ValueError("unexpected CSV header %s" % header)
            blocks = {}
            has_mod = False
            for line in f:
                line = line.strip()
                if not line:
                    continue
                n_, t_, cell_, ph, cr, cf, df, app, mod = line.split(",")
                n, cell = int(n_), int(cell_)
                blk = blocks.setdefault(n, {"n": n, "t_mid": float(t_), "rows": {}})
                blk["rows"].setdefault(ph, {})[cell] = (
                    float(cr),
                    float(cf),
                    float(df),
                    float(app),
                    None if mod == "NA" else float(mod),
                )
                if mod != "NA":
                    has_mod = True
            report = cls(initial_term=initial_term, has_mod=has_mod)
            for n in sorted(blocks):
                blk = blocks[n]
                out = {"n": n, "t_mid": blk["t_mid"], "dt": float(dts[n - 1])}
                for ph in ("s", "p"):
                    rows = blk["rows"][ph]
                    nv = max(rows) + 1
                    for j, fam in enumerate(("cr", "cf", "df", "app")):
                        out["eta_%s_%s" % (fam, ph)] = np.array(
                            [rows[c][j] for c in range(nv)]
                        )
                    if has_mod:
                        out["eta_mod_" + ph] = np.array([rows[c][4] for c in range(nv)])
                report.steps.append(out)
            return report
        finally:
            if close:
                f.close()

    def summary_text(self):
        fams = self.family_totals()
        lines = ["{", '  "initial_term": %s,' % (FMT % self.initial_term)]
        for fam in sorted(fams):
            lines.append('  "total_eta_%s_sq": %s,' % (fam, FMT % fams[fam]))
        lines.append('  "aggregate": %s' % (FMT % self.aggregate()))
        lines.append("}")
        return "\n".join(lines)


def estimate_step(op, state, prev, u_s, u_p, with_mod=True):
    """All indicator families for one step, evaluated at the interval midpoint."""
    dt = state.t - prev.t
    if state.formulation == "phases":
        S_new = state.S
        P_new = state.P + op.model.gw(state.S)
        S_old = prev.S
        P_old = prev.P + op.model.gw(prev.S)
    else:
        S_new, P_new, S_old, P_old = state.S, state.P, prev.S, prev.P
    S_mid = 0.5 * (S_new + S_old)
    P_mid = 0.5 * (P_new + P_old)
    flows = flow_functions(op, S_mid, P_mid)
    dsdt = (S_new - S_old) / dt
    cr_s, cr_p = eta_cr(op, u_s, u_p, dsdt)
    cf_s, cf_p = eta_cf(op, flows)
    df_s, df_p = eta_df(op, flows, u_s, u_p)
    app_s, app_p = eta_app(op, flows)
    blk = {
        "t_mid": 0.5 * (state.t + prev.t),
        "dt": dt,
        "eta_cr_s": cr_s,
        "eta_cr_p": cr_p,
        "eta_cf_s": cf_s,
        "eta_cf_p": cf_p,
        "eta_df_s": df_s,
        "eta_df_p": df_p,
        "eta_app_s": app_s,
        "eta_app_p": app_p,
    }
    if with_mod:
        mod = eta_mod(op, flows)
        if mod is not None:
            blk["eta_mod_s"], blk["eta_mod_p"] = mod
    return blk


def estimate_run(op, result, s0_callable=None, with_mod=True):
    """Estimator report for a completed run (reconstruction per step included)."""
    from . import fluxrecon

    report = EstimatorReport()
    check = "phases" if result.states[0].formulation == "phases" else "kirchhoff"
    for n in range(1, len(result.states)):
        state, prev = result.states[n], result.states[n - 1]
        dt = state.t - prev.t
        u_s, u_p = fluxrecon.reconstruct(op, state, prev, dt, check=check)
        blk = estimate_step(op, state, prev, u_s, u_p, with_mod=with_mod)
        blk["n"] = n
        report.steps.append(blk)
        if "eta_mod_s" in blk:
            report.has_mod = True
    report.initial_term = initial_data_term(op, result.states[0].S, s0_callable)
    return report
