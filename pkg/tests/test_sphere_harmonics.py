import math

import numpy as np
import pytest
from scipy.special import eval_gegenbauer

from local_ntk_spectra.ntk_kernels import NtkDescriptor, ntk_profile
from local_ntk_spectra.spectral_estimator import fit_decay, fit_mode_decay
from local_ntk_spectra.sphere_harmonics import (
    ModeSpectrum,
    SphereGeometry,
    cesaro_envelope,
    cesaro_kernel,
    funk_hecke_modes,
    gegenbauer,
    gegenbauer_at_one,
    modes_to_lambda,
    multiplicity,
    multiplicity_count,
    ntk_sphere_modes,
    quadrature_rule,
    zonal,
)
from local_ntk_utils.errors import QuadratureNotConverged

U_GRID = np.linspace(-1, 1, 21)


class TestSphereGeometry:
    def test_rejects_circle(self):
        with pytest.raises(ValueError, match="invalid dimension"):
            SphereGeometry(1)

    def test_surface_area(self):
        assert SphereGeometry(2).omega == pytest.approx(4 * np.pi, rel=1e-14)
        assert SphereGeometry(3).omega == pytest.approx(2 * np.pi**2, rel=1e-14)
        assert SphereGeometry(3).lam == 1.0

    @pytest.mark.parametrize("d", [2, 3, 4, 5])
    @pytest.mark.parametrize("rule", ["gauss_jacobi", "angular"])
    def test_weights_integrate_the_measure(self, d, rule):
        geometry = SphereGeometry(d)
        _, weights = quadrature_rule(geometry, 64, rule)
        assert weights.sum() * geometry.funk_hecke_constant == pytest.approx(1.0, rel=1e-12)


class TestGegenbauer:
    def test_value_at_one(self):
        assert gegenbauer(3, 1.0, 1.0) == pytest.approx(4.0)
        assert gegenbauer_at_one(3, 1.0) == pytest.approx(4.0)

    def test_degree_zero(self):
        np.testing.assert_array_equal(gegenbauer(0, 1.7, U_GRID), np.ones_like(U_GRID))

    def test_chebyshev_u2_at_zero(self):
        assert gegenbauer(2, 1.0, 0.0) == pytest.approx(-1.0)

    @pytest.mark.parametrize("lam", [0.5, 1.0, 1.5, 2.0])
    def test_matches_scipy(self, lam):
        for n in range(31):
            np.testing.assert_allclose(
                gegenbauer(n, lam, U_GRID), eval_gegenbauer(n, lam, U_GRID), rtol=1e-10, atol=1e-10
            )
            assert gegenbauer(n, lam, 1.0) == pytest.approx(gegenbauer_at_one(n, lam), rel=1e-12)

    def test_recurrence_guard(self):
        with pytest.raises(ValueError, match="recurrence guard"):
            gegenbauer(201, 1.0, 0.5)


class TestZonal:
    def test_diagonal_is_multiplicity(self):
        geometry = SphereGeometry(2)
        assert zonal(4, geometry, 1.0) == pytest.approx(9.0)
        for d in (3, 4, 5):
            for n in range(8):
                assert zonal(n, SphereGeometry(d), 1.0) == pytest.approx(multiplicity(n, d), rel=1e-12)

    def test_low_degrees(self):
        geometry = SphereGeometry(4)
        np.testing.assert_allclose(zonal(0, geometry, U_GRID), 1.0)
        np.testing.assert_allclose(zonal(1, geometry, U_GRID), 5 * U_GRID)


class TestMultiplicity:
    def test_two_sphere(self):
        assert [multiplicity(n, 2) for n in range(6)] == [1, 3, 5, 7, 9, 11]

    @pytest.mark.parametrize("d", [2, 3, 4, 5])
    def test_cumulative_count(self, d):
        for N in range(31):
            assert sum(multiplicity(n, d) for n in range(N + 1)) == multiplicity_count(N, d)

    def test_three_sphere_squares(self):
        assert all(multiplicity(n, 3) == (n + 1) ** 2 for n in range(20))


class TestFunkHeckeModes:
    @pytest.mark.parametrize("rule", ["gauss_jacobi", "angular"])
    def test_constant_profile(self, rule):
        spectrum = funk_hecke_modes(lambda t: np.ones_like(t), SphereGeometry(3), 10, quad_order=32, rule=rule)
        assert spectrum.mu[0] == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(spectrum.mu[1:], 0.0, atol=1e-12)

    @pytest.mark.parametrize("d", [2, 3, 5])
    def test_linear_profile(self, d):
        spectrum = funk_hecke_modes(lambda t: t, SphereGeometry(d), 8, quad_order=32)
        assert spectrum.mu[1] == pytest.approx(1 / (d + 1), rel=1e-12)
        np.testing.assert_allclose(np.delete(spectrum.mu, 1), 0.0, atol=1e-12)
        assert spectrum.trace() == pytest.approx(1.0, rel=1e-12)

    def test_orthogonality(self):
        geometry = SphereGeometry(3)
        for m in range(11):
            a_m = multiplicity(m, 3)
            spectrum = funk_hecke_modes(lambda t: zonal(m, geometry, t) / a_m, geometry, 10, quad_order=32)
            expected = np.zeros(11)
            expected[m] = 1 / a_m
            np.testing.assert_allclose(spectrum.mu, expected, atol=1e-8)

    def test_kinked_profile_needs_more_nodes(self):
        desc = NtkDescriptor(L=2, variant="homogeneous")
        with pytest.raises(QuadratureNotConverged, match="quadrature not converged"):
            funk_hecke_modes(lambda u: ntk_profile(desc, u), SphereGeometry(3), 10, quad_order=16)

    def test_ntk_mode_decay(self):
        spectrum = ntk_sphere_modes(L=2, d=3, n_max=60, quad_order=256)
        assert len(spectrum.negative_modes()) == 0
        fit = fit_mode_decay(spectrum, (10, 60))
        assert fit.slope == pytest.approx(-4.0, abs=0.15)

    def test_ntk_trace_calibration(self):
        L = 2
        spectrum = ntk_sphere_modes(L=L, d=3, n_max=200, quad_order=512)
        partial = np.cumsum(spectrum.mu * spectrum.mult)
        assert np.all(np.diff(partial) >= 0)
        assert partial[-1] <= L + 1 + 1e-9
        assert abs(partial[-1] - (L + 1)) / (L + 1) < 0.01

    def test_csv(self, tmp_path):
        spectrum = ModeSpectrum(mu=[1.0, 0.25, 0.0625], geometry=SphereGeometry(2))
        path = spectrum.to_csv(tmp_path / "modes.csv")
        loaded = ModeSpectrum.from_csv(path, d=2)
        np.testing.assert_array_equal(loaded.mu, spectrum.mu)
        np.testing.assert_array_equal(loaded.mult, [1, 3, 5])

    def test_csv_dimension_from_header(self, tmp_path):
        spectrum = ModeSpectrum(mu=[1.0, 0.25, 0.0625], geometry=SphereGeometry(3))
        loaded = ModeSpectrum.from_csv(spectrum.to_csv(tmp_path / "modes.csv"))
        assert loaded.geometry.d == 3
        np.testing.assert_array_equal(loaded.mult, [1, 4, 9])

    def test_csv_without_header_needs_dimension(self, tmp_path):
        path = tmp_path / "bare.csv"
        path.write_text("n,a_n,mu_n\n0,1,1.0\n")
        with pytest.raises(ValueError, match="no metadata header"):
            ModeSpectrum.from_csv(path)


class TestModesToLambda:
    def test_multiplicity_expansion(self):
        spectrum = ModeSpectrum(mu=[3.0, 1.0], geometry=SphereGeometry(2))
        np.testing.assert_array_equal(modes_to_lambda(spectrum, 4), [3.0, 1.0, 1.0, 1.0])

    def test_insufficient_degrees(self):
        spectrum = ModeSpectrum(mu=[3.0, 1.0], geometry=SphereGeometry(2))
        with pytest.raises(ValueError, match="insufficient stored degrees"):
            modes_to_lambda(spectrum, 5)

    def test_power_law_modes(self):
        d = 3
        mu = [1.0] + [n ** -(d + 1.0) for n in range(1, 61)]
        lambdas = modes_to_lambda(ModeSpectrum(mu=mu, geometry=SphereGeometry(d)), 50000)
        assert np.all(np.diff(lambdas) <= 0)
        # the staircase of multiplicities bends the fit over short windows
        assert fit_decay(lambdas, (50, 500)).slope == pytest.approx(-(d + 1) / d, abs=0.25)
        assert fit_decay(lambdas, (5000, 50000)).slope == pytest.approx(-(d + 1) / d, abs=0.05)


class TestCesaroKernel:
    def test_first_kernel_on_two_sphere(self):
        np.testing.assert_allclose(cesaro_kernel(1, SphereGeometry(2), U_GRID), 1 + U_GRID, atol=1e-14)

    @pytest.mark.parametrize("d", [2, 3])
    def test_nonnegative(self, d):
        geometry = SphereGeometry(d)
        for n in range(1, 41):
            values = cesaro_kernel(n, geometry, U_GRID)
            scale = cesaro_kernel(n, geometry, 1.0)
            assert np.all(values >= -1e-10 * scale)

    @pytest.mark.parametrize("d", [2, 3])
    def test_envelope_bounded(self, d):
        geometry = SphereGeometry(d)
        envelope = [np.max(cesaro_envelope(n, geometry, U_GRID)) for n in range(1, 41)]
        assert max(envelope[20:]) <= 2 * max(envelope[:20])
        assert math.isfinite(max(envelope))
