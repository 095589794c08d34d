"""Fluid and medium closures: mobilities, capillary pressure, Kirchhoff transform, global pressure.

Built-in families are Corey power-law relative permeabilities combined with
linear, Brooks-Corey or van Genuchten capillary pressure. The two saturation
integrals (Kirchhoff transform and the global-pressure integral) are cached
as 2049-point monotone tables with PCHIP interpolation; the inverse transform
is a bisection on the table. Singular capillary derivatives are handled by
endpoint clustering with a configurable cutoff.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

TABLE_POINTS = 2049
ENDPOINT_CUTOFF = 1e-8
CLAMP_SLACK = 1e-12

# 5-point Gauss-Legendre nodes/weights on [-1, 1]
_GL_X = np.array([
    -0.9061798459386640, -0.5384693101056831, 0.0,
    0.5384693101056831, 0.9061798459386640,
])
_GL_W = np.array([
    0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
    0.4786286704993665, 0.2369268850561891,
])


class ConstitutiveError(ValueError):
    """Raised when a closure violates a validated model assumption."""


class SaturationRangeError(ConstitutiveError):
    """Saturation outside [0,1] beyond the clamping slack."""


def _as_array(s):
    return np.asarray(s, dtype=float)


@dataclass
class FluidModel:
    """Immutable fluid/medium closure set.

    Relative permeabilities and capillary pressure depend on saturation only.
    ``lambda_floor`` adds a constant to both phase mobilities (used to bound
    mobilities away from zero in non-degenerate test setups); it enters every
    derived quantity, including the Kirchhoff transform.
    """

    mu_w: float = 1.0
    mu_n: float = 1.0
    rho_w: float = 1000.0
    rho_n: float = 800.0
    gravity: tuple = (0.0, 0.0)
    phi0: float = 0.2
    relperm: tuple = ("corey", 2.0, 2.0)
    pc_model: tuple = ("linear", 1.0)
    lambda_floor: float = 0.0
    pc_cutoff: float = ENDPOINT_CUTOFF
    validate: bool = True

    def __post_init__(self):
        if self.mu_w <= 0 or self.mu_n <= 0:
            raise ConstitutiveError("viscosities must be positive")
        if not (0.0 < self.phi0 <= 1.0):
            # phi0 == 1 is the normalized setting the error estimates assume
            raise ConstitutiveError("(A3): effective porosity must lie in (0,1]")
        self.gravity = np.asarray(self.gravity, dtype=float)
        self._build_tables()
        if self.validate:
            self._validate()

    # -- mobilities ---------------------------------------------------------

    def _krw(self, s):
        kind = self.relperm[0]
        if kind == "corey":
            return s ** self.relperm[1]
        raise ConstitutiveError("unknown relative permeability family %r" % (kind,))

    def _krn(self, sn):
        return sn ** self.relperm[2]

    def _dkrw(self, s):
        n = self.relperm[1]
        return n * np.where(s > 0, s, 0.0) ** (n - 1.0) if n != 1.0 else np.ones_like(s)

    def _dkrn(self, sn):
        n = self.relperm[2]
        return n * np.where(sn > 0, sn, 0.0) ** (n - 1.0) if n != 1.0 else np.ones_like(sn)

    def lam_w(self, s):
        """Wetting mobility, silently clamped to s in [0,1]."""
        s = np.clip(_as_array(s), 0.0, 1.0)
        return self._krw(s) / self.mu_w + self.lambda_floor

    def lam_n(self, s):
        s = np.clip(_as_array(s), 0.0, 1.0)
        return self._krn(1.0 - s) / self.mu_n + self.lambda_floor

    def lam(self, s):
        return self.lam_w(s) + self.lam_n(s)

    def dlam_w(self, s):
        s = np.clip(_as_array(s), 0.0, 1.0)
        return self._dkrw(s) / self.mu_w

    def dlam_n(self, s):
        s = np.clip(_as_array(s), 0.0, 1.0)
        return -self._dkrn(1.0 - s) / self.mu_n

    def dlam(self, s):
        return self.dlam_w(s) + self.dlam_n(s)

    # -- capillary pressure -------------------------------------------------

    def pc(self, s):
        s = np.clip(_as_array(s), 0.0, 1.0)
        kind = self.pc_model[0]
        if kind == "linear":
            return self.pc_model[1] * (1.0 - s)
        if kind == "brooks-corey":
            pe, lam = self.pc_model[1], self.pc_model[2]
            return pe * np.maximum(s, self.pc_cutoff) ** (-1.0 / lam)
        if kind == "van-genuchten":
            p0, n = self.pc_model[1], self.pc_model[2]
            mvg = 1.0 - 1.0 / n
            sc = np.clip(s, self.pc_cutoff, 1.0 - self.pc_cutoff)
            return p0 * (sc ** (-1.0 / mvg) - 1.0) ** (1.0 / n)
        raise ConstitutiveError("unknown capillary pressure family %r" % (kind,))

    def dpc(self, s):
        s = np.clip(_as_array(s), 0.0, 1.0)
        kind = self.pc_model[0]
        if kind == "linear":
            return np.full_like(s, -self.pc_model[1])
        if kind == "brooks-corey":
            pe, lam = self.pc_model[1], self.pc_model[2]
            sc = np.maximum(s, self.pc_cutoff)
            return -pe / lam * sc ** (-1.0 / lam - 1.0)
        if kind == "van-genuchten":
            p0, n = self.pc_model[1], self.pc_model[2]
            mvg = 1.0 - 1.0 / n
            sc = np.clip(s, self.pc_cutoff, 1.0 - self.pc_cutoff)
            inner = sc ** (-1.0 / mvg) - 1.0
            return -p0 / (n * mvg) * inner ** (1.0 / n - 1.0) * sc ** (-1.0 / mvg - 1.0)
        raise ConstitutiveError("unknown capillary pressure family %r" % (kind,))

    # -- saturation integrals ----------------------------------------------

    def _kirchhoff_integrand(self, s):
        return -self.lam_w(s) * self.lam_n(s) / self.lam(s) * self.dpc(s)

    def _gw_integrand(self, s):
        return self.lam_n(s) / self.lam(s) * self.dpc(s)

    def _table_grid(self):
        singular = self.pc_model[0] in ("brooks-corey", "van-genuchten")
        if not singular:
            return np.linspace(0.0, 1.0, TABLE_POINTS)
        # cosine clustering toward both endpoints, offset by the cutoff
        u = np.linspace(0.0, 1.0, TABLE_POINTS)
        t = 0.5 * (1.0 - np.cos(np.pi * u))
        lo, hi = self.pc_cutoff, 1.0 - self.pc_cutoff
        return lo + (hi - lo) * t

    def _cumulative(self, integrand, grid):
        vals = np.zeros(len(grid))
        a, b = grid[:-1], grid[1:]
        half = 0.5 * (b - a)
        midp = 0.5 * (a + b)
        panel = np.zeros(len(a))
        for x, w in zip(_GL_X, _GL_W):
            panel += w * integrand(midp + half * x)
        vals[1:] = np.cumsum(panel * half)
        return vals

    def _build_tables(self):
        grid = self._table_grid()
        ups = self._cumulative(self._kirchhoff_integrand, grid)
        gw = self._cumulative(self._gw_integrand, grid)
        if grid[0] > 0.0:
            grid = np.concatenate([[0.0], grid, [1.0]])
            ups = np.concatenate([[ups[0]], ups, [ups[-1]]])
            gw = np.concatenate([[gw[0]], gw, [gw[-1]]])
            grid, keep = np.unique(grid, return_index=True)
            ups, gw = ups[keep], gw[keep]
        self._s_grid = grid
        self._ups_table = ups
        self._gw_table = gw
        self._ups_interp = PchipInterpolator(grid, ups, extrapolate=False)
        self._gw_interp = PchipInterpolator(grid, gw, extrapolate=False)
        self.upsilon_max = float(ups[-1])

    def kirchhoff(self, s):
        """Kirchhoff-transformed saturation, normalized so the value at 0 is 0."""
        s = np.clip(_as_array(s), 0.0, 1.0)
        return self._ups_interp(s)

    def dkirchhoff(self, s):
        return self._kirchhoff_integrand(np.clip(_as_array(s), 0.0, 1.0))

    def gw(self, s):
        """Global-pressure saturation integral (value added to the wetting pressure)."""
        s = np.clip(_as_array(s), 0.0, 1.0)
        return self._gw_interp(s)

    def dgw(self, s):
        return self._gw_integrand(np.clip(_as_array(s), 0.0, 1.0))

    def kirchhoff_inverse(self, u):
        """Invert the Kirchhoff transform by bisection on the cached table."""
        u = _as_array(u)
        scalar = u.ndim == 0
        u = np.atleast_1d(u)
        if np.any(u < -1e-12) or np.any(u > self.upsilon_max + 1e-12 * max(1.0, self.upsilon_max)):
            raise ConstitutiveError("value outside the Kirchhoff transform range")
        uc = np.clip(u, 0.0, self.upsilon_max)
        hi_idx = np.searchsorted(self._ups_table, uc).clip(1, len(self._s_grid) - 1)
        lo = self._s_grid[hi_idx - 1].copy()
        hi = self._s_grid[hi_idx].copy()
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self._ups_interp(mid) < uc
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        out = 0.5 * (lo + hi)
        # the transform is flat at the range endpoints; snap them exactly
        out = np.where(uc >= self.upsilon_max, 1.0, np.where(uc <= 0.0, 0.0, out))
        return float(out[0]) if scalar else out

    # -- validation ----------------------------------------------------------

    def _validate(self):
        grid = np.linspace(0.0, 1.0, 1001)
        lw, ln = self.lam_w(grid), self.lam_n(grid)
        tot = lw + ln
        if abs(lw[0] - self.lambda_floor) > 1e-14 or abs(ln[-1] - self.lambda_floor) > 1e-14:
            raise ConstitutiveError("(A1): lambda_w(0)=0 and lambda_n(1)=0 required")
        self.c_lambda = float(tot.min())
        self.C_lambda = float(max(tot.max(), lw.max()))
        if self.c_lambda <= 0.0:
            raise ConstitutiveError("(A1): total mobility must be bounded away from zero")
        pcv = self.pc(grid)
        if np.any(np.diff(pcv) >= 0.0):
            raise ConstitutiveError("(A1): capillary pressure must be strictly decreasing")
        ups = self.kirchhoff(grid)
        if np.any(np.diff(ups) <= 0.0):
            raise ConstitutiveError("(A4): Kirchhoff transform must be strictly increasing")
        if abs(float(self.kirchhoff(0.0))) > 1e-14:
            raise ConstitutiveError("(A4): Kirchhoff transform must vanish at 0")
        self.kirchhoff_lipschitz = float(np.abs(self.dkirchhoff(grid)).max())
        if not np.isfinite(self.kirchhoff_lipschitz):
            raise ConstitutiveError("(A4): Kirchhoff transform must be Lipschitz on the grid")

    def validation_report(self):
        lines = [
            "fluid model validation",
            "  relperm = %s, pc = %s, floor = %g" % (self.relperm, self.pc_model, self.lambda_floor),
            "  (A1) c_lambda = %.6g, C_lambda = %.6g" % (self.c_lambda, self.C_lambda),
            "  (A4) kirchhoff Lipschitz bound = %.6g, Upsilon(1) = %.12g"
            % (self.kirchhoff_lipschitz, self.upsilon_max),
        ]
        return "\n".join(lines)


def _check_saturation(s):
    s = _as_array(s)
    if np.any(s < -CLAMP_SLACK) or np.any(s > 1.0 + CLAMP_SLACK):
        raise SaturationRangeError(
            "saturation outside [%g, %g]" % (-CLAMP_SLACK, 1.0 + CLAMP_SLACK)
        )
    if np.any(s < 0.0) or np.any(s > 1.0):
        warnings.warn("saturation clamped to [0,1] (within slack)", stacklevel=3)
    return np.clip(s, 0.0, 1.0)


def mobility(model, s):
    """Phase mobilities (lambda_w, lambda_n, lambda) at saturation ``s``."""
    s = _check_saturation(s)
    lw = model.lam_w(s)
    ln = model.lam_n(s)
    return lw, ln, lw + ln


def kirchhoff(model, s):
    """Kirchhoff transform of the saturation."""
    return model.kirchhoff(_check_saturation(s))


def kirchhoff_inverse(model, u):
    """Saturation with the given Kirchhoff-transformed value."""
    return model.kirchhoff_inverse(u)


def global_pressure(model, p_w, s):
    """Global pressure associated with wetting pressure ``p_w`` and saturation ``s``."""
    return np.asarray(p_w, dtype=float) + model.gw(_check_saturation(s))


@dataclass
class BoundaryData:
    """Dirichlet traces and initial saturation as (x, t) evaluable fields.

    ``sbar`` and ``pbar`` map (points (n,2), t) to nodal values; ``s0`` maps
    points to initial saturation. Nodal materialization per time level keeps
    the traces continuous piecewise linear in space and time.
    """

    sbar: object
    pbar: object
    s0: object

    def sbar_at(self, points, t):
        vals = np.asarray(self.sbar(points, t), dtype=float)
        if np.any(vals < -1e-12) or np.any(vals > 1.0 + 1e-12):
            raise ConstitutiveError("(A6): boundary saturation must lie in [0,1]")
        return np.clip(vals, 0.0, 1.0)

    def pbar_at(self, points, t):
        return np.asarray(self.pbar(points, t), dtype=float)

    def s0_at(self, points):
        vals = np.asarray(self.s0(points), dtype=float)
        if np.any(vals < -1e-12) or np.any(vals > 1.0 + 1e-12):
            raise ConstitutiveError("(A7): initial saturation must lie in [0,1]")
        return np.clip(vals, 0.0, 1.0)


def constant_boundary(s_value, p_value, s0_value=None):
    """Boundary data with constant traces (and constant initial saturation)."""
    s0v = s_value if s0_value is None else s0_value
    return BoundaryData(
        sbar=lambda x, t: np.full(len(x), float(s_value)),
        pbar=lambda x, t: np.full(len(x), float(p_value)),
        s0=lambda x: np.full(len(x), float(s0v)),
    )
