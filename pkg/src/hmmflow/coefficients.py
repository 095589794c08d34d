"""Built-in fine-scale permeability fields for tests, studies and configs.

All fields are isotropic-by-parts scalar structures wrapped as 2x2 symmetric
matrices. Layered, rotated-layered and checkerboard fields come with their
closed-form homogenized tensors; the smooth locally periodic field uses the
classical layered-media means of its periodic factor.
"""

from __future__ import annotations

import numpy as np

from .microcell import CoefficientField, MicroError


def _iso(values):
    K = np.zeros(values.shape + (2, 2))
    K[..., 0, 0] = values
    K[..., 1, 1] = values
    return K


def constant_field(value=3.0):
    """Spatially constant isotropic permeability."""
    v = float(value)

    def evaluate(pts):
        return _iso(np.full(len(pts), v))

    return CoefficientField(
        evaluate=evaluate,
        descriptor="constant(%g)" % v,
        alpha=v,
        beta=v,
        exact_homogenized=lambda x: np.diag([v, v]),
    )


def _two_phase_profile(u, lo, hi, fraction):
    return np.where(np.mod(u, 1.0) < fraction, lo, hi)


def layered_field(epsilon, lo=1.0, hi=4.0, fraction=0.5, axis=0):
    """Periodic layers k(x_axis / epsilon) alternating between lo and hi.

    Homogenized tensor: harmonic mean across the layers, arithmetic mean
    along them.
    """
    harm = 1.0 / (fraction / lo + (1.0 - fraction) / hi)
    arit = fraction * lo + (1.0 - fraction) * hi

    def evaluate(pts):
        return _iso(_two_phase_profile(pts[:, axis] / epsilon, lo, hi, fraction))

    diag = [harm, arit] if axis == 0 else [arit, harm]
    return CoefficientField(
        evaluate=evaluate,
        descriptor="layered(eps=%g, %g/%g, f=%g, axis=%d)" % (epsilon, lo, hi, fraction, axis),
        alpha=min(lo, hi),
        beta=max(lo, hi),
        exact_homogenized=lambda x, d=tuple(diag): np.diag(d),
    )


def rotated_layered_field(epsilon, lo=1.0, hi=4.0, fraction=0.5):
    """Layers at 45 degrees: k((x1+x2)/epsilon); unit-periodic in both coordinates."""
    harm = 1.0 / (fraction / lo + (1.0 - fraction) / hi)
    arit = fraction * lo + (1.0 - fraction) * hi
    n = np.array([1.0, 1.0]) / np.sqrt(2.0)
    t = np.array([1.0, -1.0]) / np.sqrt(2.0)
    K0 = harm * np.outer(n, n) + arit * np.outer(t, t)

    def evaluate(pts):
        return _iso(_two_phase_profile((pts[:, 0] + pts[:, 1]) / epsilon, lo, hi, fraction))

    return CoefficientField(
        evaluate=evaluate,
        descriptor="rotated-layered(eps=%g, %g/%g)" % (epsilon, lo, hi),
        alpha=min(lo, hi),
        beta=max(lo, hi),
        exact_homogenized=lambda x: K0.copy(),
    )


def checkerboard_field(epsilon, lo=1.0, hi=4.0):
    """Checkerboard of epsilon/2 squares; homogenized value sqrt(lo*hi) (dual symmetry)."""
    g = np.sqrt(lo * hi)

    def evaluate(pts):
        ix = np.floor(2.0 * pts[:, 0] / epsilon).astype(np.int64)
        iy = np.floor(2.0 * pts[:, 1] / epsilon).astype(np.int64)
        return _iso(np.where((ix + iy) % 2 == 0, lo, hi))

    return CoefficientField(
        evaluate=evaluate,
        descriptor="checkerboard(eps=%g, %g/%g)" % (epsilon, lo, hi),
        alpha=min(lo, hi),
        beta=max(lo, hi),
        exact_homogenized=lambda x: np.diag([g, g]),
    )


def smooth_periodic_field(epsilon, base=2.0, amplitude=1.0, modulation=0.0):
    """Smooth locally periodic field (base + modulation*x1) * (base + amplitude*sin(2 pi x1/eps)) / base.

    The periodic factor is layered in x1, so the homogenized tensor is the
    diagonal of its harmonic and arithmetic means, scaled by the smooth
    macroscopic factor.
    """
    if base <= abs(amplitude):
        raise MicroError("need base > |amplitude| for a positive field")
    harm = np.sqrt(base ** 2 - amplitude ** 2)  # harmonic mean of base + amplitude*sin
    arit = base

    def macro(x1):
        return 1.0 + modulation * x1

    def evaluate(pts):
        vals = macro(pts[:, 0]) * (base + amplitude * np.sin(2.0 * np.pi * pts[:, 0] / epsilon))
        return _iso(vals)

    lo_macro = min(macro(0.0), macro(1.0))
    hi_macro = max(macro(0.0), macro(1.0))
    if lo_macro <= 0:
        raise MicroError("macroscopic modulation must keep the field positive on [0,1]")

    def exact(x):
        return macro(float(np.atleast_1d(x)[0])) * np.diag([harm, arit])

    return CoefficientField(
        evaluate=evaluate,
        descriptor="smooth-periodic(eps=%g, base=%g, amp=%g, mod=%g)"
        % (epsilon, base, amplitude, modulation),
        alpha=lo_macro * (base - abs(amplitude)),
        beta=hi_macro * (base + abs(amplitude)),
        exact_homogenized=exact,
    )


def raster_field(matrix, domain=(0.0, 0.0, 1.0, 1.0)):
    """Piecewise-constant field from a raster grid (rows = y, columns = x).

    Values are extended by clamping outside the domain, covering the
    kappa-margin the sampling cells need.
    """
    grid = np.asarray(matrix, dtype=float)
    if grid.ndim != 2 or grid.size == 0:
        raise MicroError("raster coefficient must be a non-empty 2D matrix")
    if np.any(grid <= 0.0):
        raise MicroError("(A2): raster values must be positive")
    x0, y0, x1, y1 = domain
    ny, nx = grid.shape

    def evaluate(pts):
        ix = np.clip(((pts[:, 0] - x0) / (x1 - x0) * nx).astype(np.int64), 0, nx - 1)
        iy = np.clip(((pts[:, 1] - y0) / (y1 - y0) * ny).astype(np.int64), 0, ny - 1)
        return _iso(grid[iy, ix])

    return CoefficientField(
        evaluate=evaluate,
        descriptor="raster(%dx%d)" % (ny, nx),
        alpha=float(grid.min()),
        beta=float(grid.max()),
    )


_BUILDERS = {
    "constant": constant_field,
    "layered": layered_field,
    "rotated-layered": rotated_layered_field,
    "checkerboard": checkerboard_field,
    "smooth-periodic": smooth_periodic_field,
}


def from_spec(kind, **params):
    """Construct a named built-in coefficient field."""
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise MicroError(
            "unknown coefficient field %r (known: %s)" % (kind, ", ".join(sorted(_BUILDERS)))
        ) from None
    return builder(**params)
