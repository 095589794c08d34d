import numpy as np
import pytest

from hmmflow.constitutive import (
    BoundaryData,
    ConstitutiveError,
    FluidModel,
    SaturationRangeError,
    constant_boundary,
    global_pressure,
    kirchhoff,
    kirchhoff_inverse,
    mobility,
)

# quadrature oracle values (scipy.integrate.quad at 1e-14 tolerances) for
# Corey-2 relative permeabilities, mu_w = mu_n = 1, P_c(s) = 1 - s
UPSILON_ONE = 0.05936574836539082
UPSILON_HALF = 0.02968287418269541
GW_ONE = -0.5
GW_HALF = -0.42328679513998635


@pytest.fixture(scope="module")
def corey_linear():
    return FluidModel(mu_w=1.0, mu_n=1.0, pc_model=("linear", 1.0))


class TestMobility:
    def test_wetting_vanishes_dry(self, corey_linear):
        assert mobility(corey_linear, 0.0) == (0.0, 1.0, 1.0)

    def test_half_saturation(self, corey_linear):
        lw, ln, lt = mobility(corey_linear, 0.5)
        assert (lw, ln, lt) == (0.25, 0.25, 0.5)

    def test_nonwetting_vanishes_wet(self, corey_linear):
        assert mobility(corey_linear, 1.0) == (1.0, 0.0, 1.0)

    def test_clamps_within_slack(self, corey_linear):
        with pytest.warns(UserWarning):
            lw, _, _ = mobility(corey_linear, -1e-13)
        assert lw == 0.0

    def test_rejects_beyond_slack(self, corey_linear):
        with pytest.raises(SaturationRangeError):
            mobility(corey_linear, -1e-3)


class TestKirchhoff:
    def test_zero_at_zero(self, corey_linear):
        assert kirchhoff(corey_linear, 0.0) == 0.0

    def test_full_range_value_vs_quadrature_oracle(self, corey_linear):
        assert abs(float(kirchhoff(corey_linear, 1.0)) - UPSILON_ONE) < 1e-10

    def test_half_value(self, corey_linear):
        assert abs(float(kirchhoff(corey_linear, 0.5)) - UPSILON_HALF) < 1e-10

    def test_strictly_increasing_on_grid(self, corey_linear):
        s = np.linspace(0.0, 1.0, 1001)
        vals = kirchhoff(corey_linear, s)
        assert np.all(np.diff(vals) > 0.0)

    def test_riemann_oracle_spot_values(self, corey_linear):
        # brute-force midpoint Riemann sum with 1e6 panels, 11 spot saturations
        panels = 1_000_000
        mids = (np.arange(panels) + 0.5) / panels
        integrand = mids ** 2 * (1 - mids) ** 2 / (mids ** 2 + (1 - mids) ** 2)
        cumulative = np.concatenate([[0.0], np.cumsum(integrand) / panels])
        for s in np.linspace(0.0, 1.0, 11):
            oracle = cumulative[int(round(s * panels))]
            assert abs(float(kirchhoff(corey_linear, s)) - oracle) < 1e-8

    def test_gw_riemann_oracle(self, corey_linear):
        panels = 1_000_000
        mids = (np.arange(panels) + 0.5) / panels
        integrand = -((1 - mids) ** 2) / (mids ** 2 + (1 - mids) ** 2)
        cumulative = np.concatenate([[0.0], np.cumsum(integrand) / panels])
        for s in np.linspace(0.0, 1.0, 11):
            oracle = cumulative[int(round(s * panels))]
            assert abs(float(corey_linear.gw(s)) - oracle) < 1e-8


class TestKirchhoffInverse:
    def test_endpoints(self, corey_linear):
        assert kirchhoff_inverse(corey_linear, 0.0) == 0.0
        assert kirchhoff_inverse(corey_linear, corey_linear.upsilon_max) == 1.0

    def test_roundtrip_grid(self, corey_linear):
        s = np.linspace(0.0, 1.0, 1001)
        back = kirchhoff_inverse(corey_linear, kirchhoff(corey_linear, s))
        assert np.abs(back - s).max() < 1e-9

    def test_forward_composition(self, corey_linear):
        u = np.linspace(0.0, corey_linear.upsilon_max, 257)
        fwd = kirchhoff(corey_linear, kirchhoff_inverse(corey_linear, u))
        assert np.abs(fwd - u).max() < 1e-10

    def test_out_of_range_rejected(self, corey_linear):
        with pytest.raises(ConstitutiveError):
            kirchhoff_inverse(corey_linear, corey_linear.upsilon_max * 1.5)


class TestGlobalPressure:
    def test_dry_is_identity(self, corey_linear):
        assert global_pressure(corey_linear, 3.25, 0.0) == 3.25

    def test_full_range_vs_quadrature_oracle(self, corey_linear):
        assert abs(float(global_pressure(corey_linear, 0.0, 1.0)) - GW_ONE) < 1e-10
        assert abs(float(global_pressure(corey_linear, 0.0, 0.5)) - GW_HALF) < 1e-10

    def test_additivity_exact(self, corey_linear):
        for s in (0.2, 0.55, 0.9):
            base = global_pressure(corey_linear, 0.0, s)
            assert global_pressure(corey_linear, 11.5, s) - base == 11.5

    def test_phase_pressure_consistency(self, corey_linear):
        # the global pressure from (p_w, s) agrees with the one rebuilt from
        # p_n = p_w + P_c(s) through the non-wetting integral
        model = corey_linear
        panels = 200_000
        for s in (0.15, 0.5, 0.85):
            p_w = 2.0
            P_from_w = float(global_pressure(model, p_w, s))
            p_n = p_w + float(model.pc(s))
            mids = s * (np.arange(panels) + 0.5) / panels
            lw = mids ** 2
            ln = (1 - mids) ** 2
            gn_int = np.sum(-(lw / (lw + ln)) * (-1.0)) * s / panels
            P_from_n = p_n + gn_int - float(model.pc(0.0))
            assert abs(P_from_w - P_from_n) < 1e-6


class TestModelValidation:
    def test_increasing_pc_rejected(self):
        with pytest.raises(ConstitutiveError, match=r"\(A1\)"):
            FluidModel(pc_model=("linear", -1.0))

    def test_brooks_corey_builds_monotone(self):
        m = FluidModel(pc_model=("brooks-corey", 1.0, 2.0))
        s = np.linspace(0.0, 1.0, 1001)
        assert np.all(np.diff(m.kirchhoff(s)) >= 0.0)
        assert np.all(np.diff(m.pc(s)) <= 0.0)

    def test_van_genuchten_builds(self):
        m = FluidModel(pc_model=("van-genuchten", 1.0, 2.0))
        s = np.linspace(0.0, 1.0, 101)
        vals = m.kirchhoff(s)
        assert np.all(np.diff(vals) > 0.0)
        back = m.kirchhoff_inverse(vals)
        assert np.abs(back - s).max() < 1e-6

    def test_mobility_floor_enters_kirchhoff(self):
        base = FluidModel(pc_model=("linear", 1.0))
        floored = FluidModel(pc_model=("linear", 1.0), lambda_floor=1e-3)
        assert floored.lam_w(0.0) == pytest.approx(1e-3)
        assert floored.upsilon_max != base.upsilon_max

    def test_bad_porosity(self):
        with pytest.raises(ConstitutiveError, match=r"\(A3\)"):
            FluidModel(phi0=1.5)

    def test_report_mentions_bounds(self):
        m = FluidModel()
        rep = m.validation_report()
        assert "(A1)" in rep and "(A4)" in rep


class TestBoundaryData:
    def test_constant_boundary(self):
        bd = constant_boundary(0.3, 5.0)
        x = np.zeros((4, 2))
        assert np.all(bd.sbar_at(x, 0.0) == 0.3)
        assert np.all(bd.pbar_at(x, 1.0) == 5.0)
        assert np.all(bd.s0_at(x) == 0.3)

    def test_saturation_range_enforced(self):
        bd = BoundaryData(
            sbar=lambda x, t: np.full(len(x), 1.5),
            pbar=lambda x, t: np.zeros(len(x)),
            s0=lambda x: np.zeros(len(x)),
        )
        with pytest.raises(ConstitutiveError, match=r"\(A6\)"):
            bd.sbar_at(np.zeros((2, 2)), 0.0)
