"""Command-line driver: upscaling, simulation, estimation, adaptive runs and studies.

Subcommands: ``upscale``, ``run``, ``estimate``, ``adapt-run``, ``study``.
Exit codes: 0 success, 2 configuration error, 3 numeric failure. The fine
scale reference solver reuses the macro machinery with the raw coefficient
evaluated on a mesh resolving epsilon, for measuring true errors at desk
scale.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import adapt, estimators, fluxrecon, io as iomod, macrofv, mesh as meshmod, microcell
from .config import ConfigError, parse_config
from .constitutive import ConstitutiveError
from .linalg import LinearSolveError
from .macrofv import MacroOperator, StepFailure
from .microcell import MicroError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _setup(cfg, coarse_mesh=None, cache=None):
    """Mesh, dual, torus, tensor field and operator for one configuration."""
    mesh = coarse_mesh if coarse_mesh is not None else cfg.build_mesh()
    dual = meshmod.build_dual(mesh)
    torus = cfg.build_torus()
    coefficient = cfg.build_coefficient()
    x0, y0, x1, y1 = cfg.domain
    coefficient.spot_check(bounds=((x0, x1), (y0, y1)))
    tensors = microcell.build_tensor_field(coefficient, dual, cfg.micro, torus, cache=cache)
    model = cfg.build_model()
    op = MacroOperator(dual, tensors, model)
    return mesh, dual, torus, coefficient, tensors, model, op


def fine_reference(cfg):
    """Reference trajectory with the raw coefficient on an epsilon-resolving mesh.

    Returns (mesh, dual, op, RunResult); resolution is epsilon/fine_factor
    with the configured degree-of-freedom budget enforced.
    """
    nx, ny = cfg.fine_mesh_resolution()
    mesh = meshmod.build_structured(nx, ny, cfg.domain)
    dual = meshmod.build_dual(mesh)
    coefficient = cfg.build_coefficient()
    tensors = microcell.direct_tensor_field(coefficient, dual)
    model = cfg.build_model()
    op = MacroOperator(dual, tensors, model)
    result = macrofv.run(op, cfg.build_boundary(), cfg.build_grid(), cfg.formulation, cfg.solver)
    return mesh, dual, op, result


def _outpath(cfg, name):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def cmd_upscale(cfg, args):
    mesh, dual, torus, coefficient, tensors, model, op = _setup(cfg)
    iomod.write_tensor_csv(_outpath(cfg, "tensors.csv"), mesh, tensors)
    iomod.write_tensor_vtk(_outpath(cfg, "tensors.vtk"), mesh, tensors)
    print("upscale: %d cells, alpha=%.6g beta=%.6g, outputs in %s" % (
        mesh.n_vertices, tensors.alpha_global, tensors.beta_global, cfg.out_dir))
    return EXIT_OK


def cmd_run(cfg, args):
    mesh, dual, torus, coefficient, tensors, model, op = _setup(cfg)
    bdata = cfg.build_boundary()
    grid = cfg.build_grid()

    def snapshot(n, state):
        if n % cfg.cadence == 0 or n == grid.n_steps:
            iomod.write_state_vtk(_outpath(cfg, "state_%04d.vtk" % n), mesh, state, model)

    result = macrofv.run(op, bdata, grid, cfg.formulation, cfg.solver, snapshot_cb=snapshot)
    iomod.write_runlog_csv(_outpath(cfg, "runlog.csv"), result.log_rows)
    total_iters = sum(r.iterations for r in result.reports)
    print("run: %d steps, %d newton iterations, outputs in %s" % (
        grid.n_steps, total_iters, cfg.out_dir))
    return EXIT_OK


def cmd_estimate(cfg, args):
    mesh, dual, torus, coefficient, tensors, model, op = _setup(cfg)
    bdata = cfg.build_boundary()
    grid = cfg.build_grid()
    result = macrofv.run(op, bdata, grid, cfg.formulation, cfg.solver)
    report = estimators.estimate_run(op, result, s0_callable=bdata.s0)
    report.to_csv(_outpath(cfg, "estimate.csv"))
    summary = report.summary_text()
    with open(_outpath(cfg, "estimate_summary.txt"), "w") as f:
        f.write(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_adapt_run(cfg, args):
    if cfg.policy.cadence == "per-step":
        trace, final_mesh, final_state, model = adaptive_per_step_run(cfg)
        iomod.write_state_vtk(_outpath(cfg, "adapted_final.vtk"), final_mesh, final_state, model)
        iomod.write_adapt_trace_csv(_outpath(cfg, "adapt_trace.csv"), trace)
        print("adapt-run (per-step): final mesh %d triangles" % final_mesh.n_triangles)
        return EXIT_OK
    cache = {}
    coarse = cfg.build_mesh()
    bdata = cfg.build_boundary()
    grid = cfg.build_grid()
    trace = []
    agg_prev = None
    for cycle in range(cfg.adapt_cycles + 1):
        mesh, dual, torus, coefficient, tensors, model, op = _setup(cfg, coarse, cache)
        result = macrofv.run(op, bdata, grid, cfg.formulation, cfg.solver)
        report = estimators.estimate_run(op, result)
        agg = report.aggregate()
        trace.append((cycle, coarse.n_triangles, tensors.n_new_solves,
                      agg_prev if agg_prev is not None else agg, agg))
        agg_prev = agg
        if cycle == cfg.adapt_cycles:
            iomod.write_state_vtk(_outpath(cfg, "adapted_final.vtk"), mesh, result.states[-1], model)
            break
        marked = adapt.mark(report, None, cfg.policy, coarse)
        if len(marked) == 0 or coarse.generation.max() >= cfg.policy.max_generations:
            break
        coarse = meshmod.refine(coarse, marked)
    iomod.write_adapt_trace_csv(_outpath(cfg, "adapt_trace.csv"), trace)
    print("adapt-run: %d cycles, final mesh %d triangles, aggregate %.6g" % (
        len(trace) - 1, trace[-1][1], trace[-1][4]))
    return EXIT_OK


def adaptive_per_step_run(cfg):
    """Refine within the time loop: estimate each step, mark, refine, transfer.

    The coarse mesh may change between time levels; cell solutions are reused
    through the sampling-point cache.
    """
    cache = {}
    coarse = cfg.build_mesh()
    bdata = cfg.build_boundary()
    grid = cfg.build_grid()
    mesh_k, dual, torus, coefficient, tensors, model, op = _setup(cfg, coarse, cache)
    state = macrofv.initial_state(op, bdata, grid.times[0], cfg.formulation)
    step = {"kirchhoff": macrofv.step_kirchhoff, "phases": macrofv.step_phases}[cfg.formulation]
    trace = []
    for n in range(1, grid.n_steps + 1):
        new_state, _ = step(op, state, grid.times[n], bdata, cfg.solver)
        dt = new_state.t - state.t
        u_s, u_p = fluxrecon.reconstruct(
            op, new_state, state, dt,
            check="phases" if cfg.formulation == "phases" else "kirchhoff",
        )
        blk = estimators.estimate_step(op, new_state, state, u_s, u_p)
        blk["n"] = n
        step_report = estimators.EstimatorReport(steps=[blk], has_mod="eta_mod_s" in blk)
        functional = step_report.cell_functional(None, cfg.policy.families)
        agg = float(functional.sum())
        marked = adapt.mark_cells(functional, cfg.policy.theta_mark)
        n_new = 0
        if len(marked) and mesh_k.generation.max() < cfg.policy.max_generations and n < grid.n_steps:
            tris = adapt.mark(step_report, 1, cfg.policy, mesh_k)
            refined = meshmod.refine(mesh_k, tris)
            new_state = adapt.transfer(new_state, mesh_k, refined, bdata, model)
            mesh_k = refined
            dual = meshmod.build_dual(mesh_k)
            tensors = microcell.build_tensor_field(coefficient, dual, cfg.micro, torus, cache=cache)
            op = macrofv.MacroOperator(dual, tensors, model)
            n_new = tensors.n_new_solves
        trace.append((n, mesh_k.n_triangles, n_new, agg, agg))
        state = new_state
    return trace, mesh_k, state, model


# -- studies -------------------------------------------------------------------


def locate_values(points, mesh, nodal):
    """P1 evaluation of a nodal field at arbitrary points of its mesh."""
    tri, bary = adapt._locate(points, mesh)
    return np.einsum("na,na->n", bary, nodal[mesh.triangles[tri]])


def space_time_l2(coarse_mesh, coarse_states, fine_op, fine_states, field="S"):
    """L2(Omega_T) distance between two trajectories on nested meshes.

    The coarse states are interpolated to the fine mesh; time integration is
    the midpoint rule on the shared time grid.
    """
    fine_mesh = fine_op.mesh
    M = estimators.p1_mass_matrix(fine_mesh, fine_op.areas)
    total = 0.0
    for n in range(1, len(fine_states)):
        dt = fine_states[n].t - fine_states[n - 1].t
        acc = 0.0
        for take in (n - 1, n):
            coarse_vals = locate_values(
                fine_mesh.vertices, coarse_mesh, getattr(coarse_states[take], field)
            )
            diff = coarse_vals - getattr(fine_states[take], field)
            acc += 0.5 * float(diff @ (M @ diff))
        total += dt * acc
    return float(np.sqrt(total))


def measured_error_terms(coarse_mesh, coarse_states, fine_op, fine_states, model):
    """Left-hand-side error expression of the a posteriori bound, measured discretely.

    Dual norm of the saturation mismatch, energy norm of the pressure
    mismatch, and L2 norm of the Kirchhoff-transform mismatch, integrated in
    time by the midpoint rule on the shared grid against the fine reference.
    """
    fine_mesh = fine_op.mesh
    M = estimators.p1_mass_matrix(fine_mesh, fine_op.areas)
    dual_sq = 0.0
    energy_sq = 0.0
    ups_sq = 0.0
    for n in range(1, len(fine_states)):
        dt = fine_states[n].t - fine_states[n - 1].t
        for take, w in ((n - 1, 0.5), (n, 0.5)):
            S_c = locate_values(fine_mesh.vertices, coarse_mesh, coarse_states[take].S)
            P_c = locate_values(fine_mesh.vertices, coarse_mesh, coarse_states[take].P)
            dS = S_c - fine_states[take].S
            dP = P_c - fine_states[take].P
            dU = model.kirchhoff(S_c) - model.kirchhoff(fine_states[take].S)
            dual_sq += w * dt * estimators.dual_norm(fine_op, M @ dS) ** 2
            energy_sq += w * dt * estimators.energy_norm(fine_op, dP) ** 2
            ups_sq += w * dt * float(dU @ (M @ dU))
    return dual_sq, energy_sq, ups_sq


def study_modeling_error(cfg, ms=(8, 16, 32)):
    """Max-over-cells Frobenius gap between computed and analytic tensors, per m."""
    coefficient = cfg.build_coefficient()
    if coefficient.exact_homogenized is None:
        raise ConfigError("modeling-error study needs a coefficient with an analytic tensor")
    mesh = cfg.build_mesh()
    dual = meshmod.build_dual(mesh)
    rows = []
    for m in ms:
        micro = microcell.MicroConfig(
            epsilon=cfg.micro.epsilon, kappa=cfg.micro.kappa, kappa0=cfg.micro.kappa0, m=m
        )
        torus = meshmod.build_torus(m)
        tensors = microcell.build_tensor_field(
            coefficient, dual, micro, torus, with_discrepancy=False
        )
        gaps = [
            np.linalg.norm(tensors.tensors[i] - tensors.exact_at(mesh.vertices[i]))
            for i in range(mesh.n_vertices)
        ]
        rows.append((m, float(np.max(gaps))))
    return rows


def study_hmm_vs_fine(cfg, eps_list=(0.25, 0.125)):
    """HMM-vs-fine saturation distances and estimator effectivities per epsilon."""
    out = []
    for eps in eps_list:
        sub = _with_micro_epsilon(cfg, eps)
        mesh, dual, torus, coefficient, tensors, model, op = _setup(sub)
        bdata = sub.build_boundary()
        grid = sub.build_grid()
        hmm = macrofv.run(op, bdata, grid, "kirchhoff", sub.solver)
        report = estimators.estimate_run(op, hmm, s0_callable=bdata.s0, with_mod=False)
        fmesh, fdual, fop, fine = fine_reference(sub)
        l2 = space_time_l2(mesh, hmm.states, fop, fine.states)
        dual_sq, energy_sq, ups_sq = measured_error_terms(mesh, hmm.states, fop, fine.states, model)
        measured = dual_sq + energy_sq + ups_sq
        aggregate = report.aggregate(include_mod=False)
        out.append(
            {
                "epsilon": eps,
                "l2_saturation": l2,
                "measured_error_sq": measured,
                "aggregate": aggregate,
                "effectivity": aggregate / measured if measured > 0 else np.inf,
            }
        )
    return out


def _with_micro_epsilon(cfg, eps):
    import copy

    sub = copy.copy(cfg)
    sub.micro = microcell.MicroConfig(epsilon=eps, kappa=eps, kappa0=None, m=cfg.micro.m)
    sub.fine_epsilon = eps
    spec = dict(cfg.coefficient_spec)
    if "epsilon" in spec:
        spec["epsilon"] = eps
    sub.coefficient_spec = spec
    return sub


def study_cross_form(cfg, levels=2):
    """Final-time L2 distance between the two formulations under refinement."""
    rows = []
    for lev in range(levels):
        factor = 2 ** lev
        sub = _scaled_resolution(cfg, factor)
        mesh, dual, torus, coefficient, tensors, model, op = _setup(sub)
        bdata = sub.build_boundary()
        grid = sub.build_grid()
        kir = macrofv.run(op, bdata, grid, "kirchhoff", sub.solver)
        pha = macrofv.run(op, bdata, grid, "phases", sub.solver)
        M = estimators.p1_mass_matrix(mesh, op.areas)
        diff = kir.states[-1].S - pha.states[-1].S
        rows.append((sub.nx, sub.n_steps, float(np.sqrt(diff @ (M @ diff)))))
    return rows


def _scaled_resolution(cfg, factor):
    import copy

    sub = copy.copy(cfg)
    sub.nx = cfg.nx * factor
    sub.ny = cfg.ny * factor
    sub.n_steps = cfg.n_steps * factor
    return sub


def cmd_study(cfg, args):
    if args.mode == "modeling-error":
        rows = study_modeling_error(cfg)
        print("m,max_frobenius_gap")
        for m, gap in rows:
            print("%d,%.17g" % (m, gap))
        if max(gap for _, gap in rows) < 1e-12:
            print("decay: exact (gaps at machine precision)")
        else:
            decays = all(b[1] <= a[1] * 1.001 for a, b in zip(rows, rows[1:]))
            print("decay: %s" % ("yes" if decays else "no"))
    elif args.mode == "hmm-vs-fine":
        rows = study_hmm_vs_fine(cfg)
        print("epsilon,l2_saturation,measured_error_sq,aggregate,effectivity")
        for r in rows:
            print(
                "%.6g,%.17g,%.17g,%.17g,%.6g"
                % (r["epsilon"], r["l2_saturation"], r["measured_error_sq"], r["aggregate"], r["effectivity"])
            )
    elif args.mode == "cross-form":
        rows = study_cross_form(cfg)
        print("nx,n_steps,l2_final_saturation_gap")
        for nx, ns, gap in rows:
            print("%d,%d,%.17g" % (nx, ns, gap))
    else:
        raise ConfigError("unknown study mode %r" % args.mode)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="hmmflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("upscale", cmd_upscale),
        ("run", cmd_run),
        ("estimate", cmd_estimate),
        ("adapt-run", cmd_adapt_run),
        ("study", cmd_study),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the [section] key=value config")
        sp.add_argument("--formulation", choices=("kirchhoff", "phases"), default=None)
        if name == "study":
            sp.add_argument(
                "--mode",
                required=True,
                choices=("modeling-error", "hmm-vs-fine", "cross-form"),
            )
        sp.set_defaults(func=fn)
    return p


def cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = parse_config(args.config)
        if args.formulation:
            cfg.formulation = args.formulation
        return args.func(cfg, args)
    except (ConfigError, ConstitutiveError, MicroError, meshmod.MeshError) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (StepFailure, LinearSolveError, fluxrecon.ReconstructionError) as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
