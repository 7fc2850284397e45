import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ampi.denoiser import (
    LaplaceDenoiser,
    erfcx,
    laplace_gauss_F,
    laplace_gauss_G,
    make_denoiser,
    mixture_F,
    mixture_G,
    point_mass_prior,
    quadrature_FG,
)
from ampi.model import Constellation
from ampi.priors import BernoulliGaussPrior, DiscretePrior, EffectivePrior, GaussianInputNoise, LaplacePrior

QPSK = Constellation.qpsk()


def gauss_hermite_qpsk(z, tau, nt, nodes=60):
    """Posterior moments by 2-D Gauss-Hermite over x, one rule per atom's input-noise bump."""
    u, w = np.polynomial.hermite.hermgauss(nodes)
    s = np.sqrt(nt / 2)
    xr = np.sqrt(2) * s * u
    num0 = num1 = num2 = 0.0
    for a, p in zip(QPSK.points, QPSK.probs):
        x = a + xr[:, None] + 1j * xr[None, :]
        ww = w[:, None] * w[None, :] / np.pi
        lik = np.exp(-np.abs(z - x) ** 2 / tau) / (np.pi * tau)
        num0 += p * np.sum(ww * lik)
        num1 += p * np.sum(ww * lik * x)
        num2 += p * np.sum(ww * lik * np.abs(x) ** 2)
    mean = num1 / num0
    return mean, num2 / num0 - abs(mean) ** 2


class TestErfcx:
    def test_zero(self):
        assert erfcx(0.0) == 1.0

    def test_one(self):
        ref = float(mpmath.exp(1) * mpmath.erfc(1))
        assert abs(erfcx(1.0) / ref - 1) < 1e-14
        assert abs(erfcx(1.0) - 0.427583576155807) < 1e-15

    def test_asymptote(self):
        assert abs(erfcx(50.0) * 50 * np.sqrt(np.pi) - 1) < 1e-3

    def test_negative_range_finite(self):
        x = np.linspace(-26, 0, 27)
        assert np.all(np.isfinite(erfcx(x)))


class TestMixture:
    def test_point_mass(self):
        c = Constellation([0.5 - 0.2j], [1.0])
        z = np.array([3.0 + 1j, -2.0, 0.1j])
        np.testing.assert_array_equal(mixture_F(z, 0.3, c, 0.0), 0.5 - 0.2j)
        np.testing.assert_allclose(mixture_G(z, 0.3, c, 0.0), 0.0)
        np.testing.assert_allclose(mixture_G(z, 0.3, c, 0.2), 0.2 * 0.3 / 0.5)

    def test_small_tau_returns_observation(self):
        z = 0.37 - 0.81j
        assert abs(mixture_F(z, 1e-10, QPSK, 0.1) - z) < 1e-8

    def test_bpsk_at_zero(self):
        c = Constellation.bpsk()
        assert abs(mixture_F(0.0, 0.5, c, 0.0)) < 1e-15
        assert mixture_G(0.0, 0.5, c, 0.0) == pytest.approx(1.0)

    def test_gauss_hermite_oracle(self):
        z, tau, nt = 0.3 + 0.2j, 0.1, 0.01
        mean, var = gauss_hermite_qpsk(z, tau, nt)
        assert abs(mixture_F(z, tau, QPSK, nt) - mean) < 1e-9
        assert abs(mixture_G(z, tau, QPSK, nt) - var) < 1e-9

    def test_quadrature_oracle_point(self):
        ep = EffectivePrior(DiscretePrior(QPSK), GaussianInputNoise(0.01))
        m, v = quadrature_FG(ep, 0.3 + 0.2j, 0.1)
        assert abs(m[0] - mixture_F(0.3 + 0.2j, 0.1, QPSK, 0.01)) < 1e-9
        assert abs(v[0] - mixture_G(0.3 + 0.2j, 0.1, QPSK, 0.01)) < 1e-9

    def test_no_underflow_at_high_snr(self):
        f = mixture_F(np.array([40.0 + 40j]), 1e-6, QPSK, 0.0)
        assert np.all(np.isfinite(f))

    def test_invalid_tau(self):
        with pytest.raises(ValueError):
            mixture_F(0.0, 0.0, QPSK, 0.1)


class TestLaplace:
    def test_zero(self):
        assert laplace_gauss_F(0.0, 0.2, 1.0, 0.1) == 0.0

    def test_oracle_points(self):
        ep = EffectivePrior(LaplacePrior(1.0), GaussianInputNoise(0.1))
        m, _ = quadrature_FG(ep, 1.5, 0.2)
        assert abs(laplace_gauss_F(1.5, 0.2, 1.0, 0.1) - m[0]) < 1e-8
        _, v = quadrature_FG(ep, 0.0, 0.2)
        assert abs(laplace_gauss_G(0.0, 0.2, 1.0, 0.1) - v[0]) < 1e-8

    def test_tails(self):
        assert abs(laplace_gauss_F(1e6, 0.2, 1.0, 0.1) - (1e6 - 0.2)) < 1e-6
        assert abs(laplace_gauss_F(-1e6, 0.2, 1.0, 0.1) - (-1e6 + 0.2)) < 1e-6
        ep = EffectivePrior(LaplacePrior(1.0), GaussianInputNoise(0.1))
        _, v = quadrature_FG(ep, 1e4, 0.2)
        g = laplace_gauss_G(1e4, 0.2, 1.0, 0.1)
        assert abs(g - 0.2) < 1e-4 and abs(g - v[0]) < 1e-4

    @pytest.mark.parametrize("z", [-3.0, -0.4, 0.0, 0.25, 1.0, 2.5, 8.0])
    def test_variance_is_scaled_slope(self, z):
        # G = tau dF/dz: posterior variance of x equals tau times the slope of its posterior mean
        tau, lam, nt, h = 0.2, 1.0, 0.1, 1e-5
        slope = (laplace_gauss_F(z + h, tau, lam, nt) - laplace_gauss_F(z - h, tau, lam, nt)) / (2 * h)
        assert abs(laplace_gauss_G(z, tau, lam, nt) - tau * slope) < 1e-6

    def test_rejects_bad_parameters(self):
        for args in [(1.0, 0.0, 1.0, 0.1), (1.0, 0.2, 0.0, 0.1), (1.0, 0.2, 1.0, -0.1)]:
            with pytest.raises(ValueError):
                laplace_gauss_F(*args)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e3, 1e3), st.floats(1e-4, 1e2), st.floats(1e-2, 1e2), st.floats(0, 10))
    def test_shrinkage_bound_and_positivity(self, z, tau, lam, nt):
        f = laplace_gauss_F(z, tau, lam, nt)
        g = laplace_gauss_G(z, tau, lam, nt)
        assert abs(f - z) <= lam * tau * (1 + 1e-12) + 4 * np.spacing(abs(z))
        assert 0 <= g
        assert laplace_gauss_F(-z, tau, lam, nt) == -f
        assert laplace_gauss_G(-z, tau, lam, nt) == g

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-5, 5), st.floats(1e-3, 10))
    def test_mixture_symmetry(self, z, tau):
        ep = EffectivePrior(BernoulliGaussPrior(0.1), GaussianInputNoise(0.01))
        d = make_denoiser(ep)
        f, g = d.FG(np.array([z, -z]), tau)
        assert f[0] == -f[1] and g[0] == g[1] and g[0] >= 0


class TestVarianceLimits:
    @pytest.mark.parametrize("ep", [
        EffectivePrior(LaplacePrior(1.0), GaussianInputNoise(0.1)),
        EffectivePrior(DiscretePrior(QPSK), GaussianInputNoise(0.1)),
        EffectivePrior(BernoulliGaussPrior(0.05), GaussianInputNoise(0.01)),
    ])
    def test_large_tau_gives_prior_variance(self, ep):
        d = make_denoiser(ep)
        tau = 1e6 * ep.var
        rng = np.random.default_rng(0)
        z = rng.normal(size=50) * np.sqrt(tau)
        g = d.G(z.astype(complex) if ep.field == "complex" else z, tau)
        np.testing.assert_allclose(g, ep.var, rtol=0.01)


class TestQuadratureOracle:
    def test_point_mass(self):
        ep = point_mass_prior(0.4 + 0.3j, 0.2)
        z, tau = np.array([1.0 - 1j, -0.5 + 2j]), 0.3
        m, v = quadrature_FG(ep, z, tau)
        rho = 0.2 / 0.5
        np.testing.assert_allclose(m, 0.4 + 0.3j + rho * (z - (0.4 + 0.3j)), atol=1e-14)
        np.testing.assert_allclose(v, 0.2 * 0.3 / 0.5, atol=1e-14)

    def test_bernoulli_gauss_matches_mixture(self):
        ep = EffectivePrior(BernoulliGaussPrior(0.05), GaussianInputNoise(5e-5))
        d = make_denoiser(ep)
        z = np.array([-3.0, -0.02, 0.0, 0.01, 0.1, 2.0])
        m, v = quadrature_FG(ep, z, 2e-4)
        f, g = d.FG(z, 2e-4)
        np.testing.assert_allclose(m, f, atol=1e-10)
        np.testing.assert_allclose(v, g, atol=1e-10)

    def test_denoiser_objects(self):
        d = LaplaceDenoiser(2.0, 0.1)
        assert d.var == pytest.approx(0.6)
        assert d.F(0.3, 0.5) == laplace_gauss_F(0.3, 0.5, 2.0, 0.1)
