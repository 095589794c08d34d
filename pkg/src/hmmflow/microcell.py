"""Periodic corrector cell problems and the effective intrinsic permeability.

Each dual-cell center gets two P1 corrector solves on a periodic torus
triangulation of the sampling cell. The effective 2x2 tensor is the
corrector-weighted average of the sampled coefficient, optionally restricted
to an interior oversampling window. Per-cell flux-jump and sampling
discrepancy terms feed the fine-scale and approximation error indicators.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import linalg

CELL_SOLVER_TOL = 1e-12


class MicroError(ValueError):
    """Raised for invalid micro-scale configuration or coefficient data."""


@dataclass
class CoefficientField:
    """Evaluable fine-scale permeability with global spectral bounds.

    ``evaluate(points)`` maps (n,2) points to (n,2,2) symmetric matrices and
    must be defined on a neighborhood of the domain (sampling cells reach a
    half-kappa margin beyond it). ``exact_homogenized`` optionally supplies
    the analytic homogenized tensor as a callable of x, for oracle studies.
    """

    evaluate: object
    descriptor: str
    alpha: float
    beta: float
    exact_homogenized: object = None

    def __post_init__(self):
        if not (0.0 < self.alpha <= self.beta):
            raise MicroError("(A2): spectral bounds must satisfy 0 < alpha <= beta")

    def spot_check(self, bounds=((0.0, 1.0), (0.0, 1.0)), n=10_000, seed=20260808):
        """Sample symmetry and the (A2) spectral bounds at random points/directions."""
        rng = np.random.default_rng(seed)
        (x0, x1), (y0, y1) = bounds
        pts = np.column_stack(
            [rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)]
        )
        K = np.asarray(self.evaluate(pts), dtype=float)
        if K.shape != (n, 2, 2):
            raise MicroError("coefficient evaluator must return (n,2,2) matrices")
        if np.abs(K - np.swapaxes(K, 1, 2)).max() > 0.0:
            raise MicroError("(A2): coefficient must be exactly symmetric")
        xi = rng.normal(size=(n, 2))
        xi /= np.linalg.norm(xi, axis=1, keepdims=True)
        quad = np.einsum("ni,nij,nj->n", xi, K, xi)
        tol = 1e-10 * max(1.0, self.beta)
        if quad.min() < self.alpha - tol or quad.max() > self.beta + tol:
            raise MicroError(
                "(A2): sampled quadratic form outside [alpha, beta] = [%g, %g]:"
                " got [%g, %g]" % (self.alpha, self.beta, quad.min(), quad.max())
            )
        return float(quad.min()), float(quad.max())


@dataclass(frozen=True)
class MicroConfig:
    """Micro-scale sampling parameters: kappa >= kappa0 >= epsilon > 0."""

    epsilon: float
    kappa: float
    kappa0: float = None
    m: int = 16

    def __post_init__(self):
        if self.kappa0 is None:
            object.__setattr__(self, "kappa0", self.kappa)
        if not (self.kappa >= self.kappa0 >= self.epsilon > 0.0):
            raise MicroError(
                "micro scales must satisfy kappa >= kappa0 >= epsilon > 0, got"
                " kappa=%g kappa0=%g epsilon=%g" % (self.kappa, self.kappa0, self.epsilon)
            )
        if self.m < 2:
            raise MicroError("torus resolution m must be >= 2")

    @property
    def oversampled(self):
        return self.kappa0 < self.kappa


@dataclass
class CellSolution:
    """Correctors and micro-residual metadata for one sampling point."""

    x_D: np.ndarray
    coeff: np.ndarray        # (nt, 2, 2) sampled piecewise-constant coefficient
    correctors: np.ndarray   # (2, n_vertices) zero-mean nodal fields
    alpha_loc: float
    beta_loc: float
    residuals: np.ndarray    # (2,) relative Galerkin residuals
    torus: object = field(repr=False, default=None)
    jump_m: float = None
    sampling_sup: float = None

    def corrector_gradients(self):
        """Per-triangle gradients of both correctors, shape (2, nt, 2)."""
        t = self.torus
        return np.einsum("ita,tad->itd", self.correctors[:, t.triangles], t.grads)


def sample_coefficient(coefficient, x_D, cfg, torus):
    """Piecewise-constant sampling of y -> K(x_D + kappa*y) on the torus.

    One midpoint (barycenter) evaluation per triangle; exact whenever the
    coefficient is constant on each torus triangle.
    """
    pts = np.asarray(x_D, dtype=float)[None, :] + cfg.kappa * torus.bary
    K = np.asarray(coefficient.evaluate(pts), dtype=float)
    if K.shape != (torus.n_triangles, 2, 2):
        raise MicroError("coefficient evaluator returned wrong shape %s" % (K.shape,))
    return 0.5 * (K + np.swapaxes(K, 1, 2))


def _assemble_periodic(coeff, torus):
    t = torus.triangles
    g = torus.grads
    area = torus.areas
    n = torus.n_vertices
    Kg = np.einsum("tij,taj->tai", coeff, g)
    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            rows.append(t[:, a])
            cols.append(t[:, b])
            vals.append(area * np.einsum("td,td->t", g[:, a], Kg[:, b]))
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    mass = np.zeros(n)
    np.add.at(mass, t.ravel(), np.repeat(area / 3.0, 3))
    return A, mass


def solve_cell(coeff, torus, direction):
    """Solve one periodic corrector problem; returns (w, relative residual)."""
    if direction not in (0, 1):
        raise MicroError("direction must be 0 or 1")
    A, mass = _assemble_periodic(coeff, torus)
    w, res, _ = _solve_with_multiplier(A, mass, coeff, torus, direction)
    return w, res


def _cell_rhs(coeff, torus, direction):
    t, g, area = torus.triangles, torus.grads, torus.areas
    b = np.zeros(torus.n_vertices)
    Ke = coeff[:, :, direction]
    for a in range(3):
        np.add.at(b, t[:, a], area * np.einsum("td,td->t", g[:, a], Ke))
    return b


def _solve_with_multiplier(A, mass, coeff, torus, direction, lu=None):
    n = torus.n_vertices
    b = _cell_rhs(coeff, torus, direction)
    rhs = np.concatenate([-b, [0.0]])
    if lu is None:
        full = sp.bmat([[A, mass[:, None]], [mass[None, :], None]], format="csr")
        lu = linalg.SparseMatrix(full, symmetric=True)
    sol = lu.factorization.solve(rhs)
    w = sol[:n]
    resvec = A @ w + b
    res = np.linalg.norm(resvec) / max(np.linalg.norm(b), 1e-300)
    if res > CELL_SOLVER_TOL * 1e3:
        raise linalg.LinearSolveError("cell problem residual %.3e too large" % res)
    return w, res, lu


def _solve_regularized_cg(A, mass, coeff, torus, direction):
    # the stiffness kernel is the constants; a matrix-free rank-one mass
    # regularization makes the operator SPD and keeps the solution zero-mean
    import scipy.sparse.linalg as spla

    b = _cell_rhs(coeff, torus, direction)
    scale = abs(A.diagonal()).max()
    n = len(b)
    op = spla.LinearOperator(
        (n, n), matvec=lambda v: A @ v + scale * mass * (mass @ v)
    )
    diag = A.diagonal() + scale * mass ** 2
    M = spla.LinearOperator((n, n), matvec=lambda v: v / diag)
    w, info = spla.cg(op, -b, rtol=CELL_SOLVER_TOL * 1e-1, atol=0.0, maxiter=40 * n, M=M)
    if info != 0:
        raise linalg.LinearSolveError("cell problem cg failed (info=%d)" % info)
    res = np.linalg.norm(A @ w + b) / max(np.linalg.norm(b), 1e-300)
    if res > CELL_SOLVER_TOL * 1e3:
        raise linalg.LinearSolveError("cell problem residual %.3e too large" % res)
    return w, res


def solve_cell_problems(coefficient, x_D, cfg, torus, solver="direct"):
    """Sample the coefficient at x_D and solve both corrector problems.

    ``solver`` is "direct" (shared sparse factorization) or "cg"
    (diagonally preconditioned CG on a rank-one-regularized operator,
    intended for large torus resolutions).
    """
    coeff = sample_coefficient(coefficient, x_D, cfg, torus)
    eigs = np.linalg.eigvalsh(coeff)
    A, mass = _assemble_periodic(coeff, torus)
    lu = None
    ws, residuals = [], []
    for i in (0, 1):
        if solver == "cg":
            w, res = _solve_regularized_cg(A, mass, coeff, torus, i)
        else:
            w, res, lu = _solve_with_multiplier(A, mass, coeff, torus, i, lu)
        ws.append(w)
        residuals.append(res)
    sol = CellSolution(
        x_D=np.asarray(x_D, dtype=float),
        coeff=coeff,
        correctors=np.array(ws),
        alpha_loc=float(eigs.min()),
        beta_loc=float(eigs.max()),
        residuals=np.array(residuals),
        torus=torus,
    )
    sol.jump_m = jump_indicator(sol)
    return sol


def _corrected_gradients(sol):
    grad = sol.corrector_gradients()
    grad[0, :, 0] += 1.0
    grad[1, :, 1] += 1.0
    return grad  # (2, nt, 2): e_i + grad w^i per triangle


def effective_tensor(sol):
    """Effective permeability from the corrector-weighted coefficient average."""
    grad = _corrected_gradients(sol)
    Kg = np.einsum("tij,ntj->nti", sol.coeff, grad)
    K0 = np.einsum("nti,mti,t->nm", grad, Kg, sol.torus.areas)
    return 0.5 * (K0 + K0.T)


def effective_tensor_nonsymmetric(sol):
    """Same tensor via the Galerkin-orthogonality-reduced formula (e_j test)."""
    grad = _corrected_gradients(sol)
    Kg = np.einsum("tij,ntj->nti", sol.coeff, grad)
    # entry (i, j) = integral of the j-th component of K (e_i + grad w^i)
    return np.einsum("ntj,t->nj", Kg, sol.torus.areas)


def _clip_areas_to_window(torus, half):
    """Area of each torus triangle inside the centered square of half-width ``half``."""

    def clip(poly, axis, bound, keep_below):
        out = []
        n = len(poly)
        for k in range(n):
            p, q = poly[k], poly[(k + 1) % n]
            pin = (p[axis] <= bound) if keep_below else (p[axis] >= bound)
            qin = (q[axis] <= bound) if keep_below else (q[axis] >= bound)
            if pin:
                out.append(p)
            if pin != qin:
                s = (bound - p[axis]) / (q[axis] - p[axis])
                out.append(p + s * (q - p))
        return out

    areas = np.zeros(torus.n_triangles)
    for ti in range(torus.n_triangles):
        poly = [torus.tri_coords[ti, k].copy() for k in range(3)]
        for axis in (0, 1):
            poly = clip(np.array(poly), axis, half, True) if len(poly) else poly
            poly = clip(np.array(poly), axis, -half, False) if len(poly) else poly
        if len(poly) >= 3:
            poly = np.array(poly)
            x, y = poly[:, 0], poly[:, 1]
            areas[ti] = 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    return areas


def oversampled_tensor(sol, cfg):
    """Effective tensor averaged over the interior window Y_{kappa0,kappa}.

    Reduces to :func:`effective_tensor` when kappa0 == kappa. The window must
    be resolved by the torus mesh; a too-small window triggers a warning.
    """
    if not cfg.oversampled:
        return effective_tensor(sol)
    half = 0.5 * cfg.kappa0 / cfg.kappa
    h = 1.0 / sol.torus.m
    if 2.0 * half < 2.0 * h:
        warnings.warn(
            "oversampling window (side %.3g) below 2 mesh layers (h=%.3g)" % (2 * half, h)
        )
    areas = _clip_areas_to_window(sol.torus, half)
    vol = areas.sum()
    if vol <= 0.0:
        raise MicroError("oversampling window has vanishing resolved volume")
    grad = _corrected_gradients(sol)
    Kg = np.einsum("tij,ntj->nti", sol.coeff, grad)
    K0 = np.einsum("nti,mti,t->nm", grad, Kg, areas) / vol
    return 0.5 * (K0 + K0.T)


def jump_indicator(sol):
    """Flux-jump micro residual: weighted L2 norm of corrected-flux jumps over torus faces."""
    torus = sol.torus
    grad = _corrected_gradients(sol)
    flux = np.einsum("tij,ntj->nti", sol.coeff, grad)  # (2, nt, 2)
    t1 = torus.face_tris[:, 0]
    t2 = torus.face_tris[:, 1]
    jumps = flux[:, t1, :] - flux[:, t2, :]  # (2, nf, 2)
    per_face = (jumps ** 2).sum(axis=(0, 2))
    return float(np.sqrt(np.sum(torus.face_h * torus.face_len * per_face)))


def sampling_discrepancy(sol, coefficient, cfg, sample_points):
    """Sampled sup over x of the L2(Y) coefficient-discrepancy term.

    For each macro sample point x, compares K(x + kappa*y) at torus triangle
    barycenters with the frozen sampled coefficient at x_D, weighted by the
    corrected gradients. Reported as a sampled under-estimate of the true sup.
    """
    grad = _corrected_gradients(sol)
    torus = sol.torus
    best = 0.0
    for x in sample_points:
        pts = np.asarray(x, dtype=float)[None, :] + cfg.kappa * torus.bary
        Kx = np.asarray(coefficient.evaluate(pts), dtype=float)
        diff = Kx - sol.coeff
        v = np.einsum("tij,ntj->nti", diff, grad)
        val = np.sqrt(np.sum((v ** 2).sum(axis=(0, 2)) * torus.areas))
        best = max(best, float(val))
    return best


@dataclass
class EffectiveTensorField:
    """Per-dual-cell effective tensors plus micro metadata for the estimators."""

    tensors: np.ndarray      # (n_cells, 2, 2)
    alpha_loc: np.ndarray
    beta_loc: np.ndarray
    jump_m: np.ndarray
    sampling_sup: np.ndarray
    cells: list = field(repr=False, default=None)
    exact: object = None     # optional callable x -> exact homogenized 2x2
    n_new_solves: int = 0

    @property
    def alpha_global(self):
        # estimate of the essential infimum: min over computed cells
        return float(self.alpha_loc.min())

    @property
    def beta_global(self):
        return float(self.beta_loc.max())

    def exact_at(self, x):
        if self.exact is None:
            return None
        return np.asarray(self.exact(np.asarray(x, dtype=float)), dtype=float)


def _cache_key(x_D, cfg, torus):
    return (round(float(x_D[0]), 12), round(float(x_D[1]), 12),
            cfg.epsilon, cfg.kappa, cfg.kappa0, cfg.m, id(torus))


def build_tensor_field(coefficient, dual, cfg, torus, cache=None, with_discrepancy=True):
    """Solve (or reuse) one cell problem per dual cell and assemble the tensor field.

    ``cache`` maps cache keys to (CellSolution, tensor, sup) triples and is
    reused across refinements: only cells at new sample points are solved.
    """
    mesh = dual.mesh
    nv = mesh.n_vertices
    tensors = np.empty((nv, 2, 2))
    alpha_loc = np.empty(nv)
    beta_loc = np.empty(nv)
    jump_m = np.empty(nv)
    sampling_sup = np.zeros(nv)
    cells = [None] * nv
    vertex_tris = mesh.vertex_triangles()
    n_new = 0
    for i in range(nv):
        x_D = mesh.vertices[i]
        key = _cache_key(x_D, cfg, torus)
        hit = cache.get(key) if cache is not None else None
        if hit is None:
            solution = solve_cell_problems(coefficient, x_D, cfg, torus)
            tensor = oversampled_tensor(solution, cfg) if cfg.oversampled else effective_tensor(solution)
            if with_discrepancy:
                pts = {tuple(x_D)}
                for ti in vertex_tris[i]:
                    for v in mesh.triangles[ti]:
                        pts.add(tuple(mesh.vertices[v]))
                solution.sampling_sup = sampling_discrepancy(
                    solution, coefficient, cfg, sorted(pts)
                )
            else:
                solution.sampling_sup = 0.0
            hit = (solution, tensor)
            if cache is not None:
                cache[key] = hit
            n_new += 1
        solution, tensor = hit
        _check_spd(tensor, solution, coefficient)
        tensors[i] = tensor
        alpha_loc[i] = solution.alpha_loc
        beta_loc[i] = solution.beta_loc
        jump_m[i] = solution.jump_m
        sampling_sup[i] = solution.sampling_sup
        cells[i] = solution
    exact = coefficient.exact_homogenized
    return EffectiveTensorField(
        tensors=tensors,
        alpha_loc=alpha_loc,
        beta_loc=beta_loc,
        jump_m=jump_m,
        sampling_sup=sampling_sup,
        cells=cells,
        exact=exact,
        n_new_solves=n_new,
    )


def _check_spd(tensor, solution, coefficient):
    if np.abs(tensor - tensor.T).max() > 1e-10 * max(1.0, np.abs(tensor).max()):
        raise MicroError("effective tensor lost symmetry")
    eigs = np.linalg.eigvalsh(tensor)
    slack = 1e-8 * max(1.0, solution.beta_loc)
    if eigs.min() < coefficient.alpha - slack or eigs.max() > coefficient.beta + slack:
        raise MicroError(
            "effective tensor spectrum [%g, %g] outside coefficient bounds [%g, %g]"
            % (eigs.min(), eigs.max(), coefficient.alpha, coefficient.beta)
        )


def direct_tensor_field(coefficient, dual):
    """Tensor field from direct pointwise evaluation of the fine-scale coefficient.

    Used by the fine-scale reference solver: no correctors, one evaluation at
    each dual-cell center. Micro metadata is zeroed.
    """
    pts = dual.mesh.vertices
    K = np.asarray(coefficient.evaluate(pts), dtype=float)
    eigs = np.linalg.eigvalsh(K)
    return EffectiveTensorField(
        tensors=K,
        alpha_loc=eigs[:, 0].copy(),
        beta_loc=eigs[:, 1].copy(),
        jump_m=np.zeros(len(pts)),
        sampling_sup=np.zeros(len(pts)),
        cells=None,
        exact=coefficient.exact_homogenized,
    )
