import numpy as np
import pytest
from scipy import integrate

from ampi import model
from ampi.model import Constellation
from ampi.priors import (
    AtomicDensityError,
    BernoulliGaussPrior,
    DiscretePrior,
    EffectivePrior,
    GaussianInputNoise,
    LaplacePrior,
    effective_density,
    effective_moments,
    laplace_gauss_logpdf,
    laplace_gauss_pdf_raw,
)


def laplace(lam, nt=0.0):
    return EffectivePrior(LaplacePrior(lam), GaussianInputNoise(nt))


class TestDensity:
    def test_pure_laplace_at_zero(self):
        assert effective_density(laplace(1.0), 0.0) == pytest.approx(0.5)
        assert effective_density(laplace(1.0, 1e-12), 0.0) == pytest.approx(0.5, rel=1e-5)

    def test_laplace_convolution_oracle(self):
        nt = 0.1
        f = lambda s: 0.5 * np.exp(-abs(s)) * np.exp(-s * s / (2 * nt)) / np.sqrt(2 * np.pi * nt)
        ref = integrate.quad(f, -np.inf, 0, epsabs=1e-14)[0] + integrate.quad(f, 0, np.inf, epsabs=1e-14)[0]
        assert abs(effective_density(laplace(1.0, nt), 0.0) - ref) < 1e-8

    def test_symmetry(self):
        x = np.linspace(0, 20, 101)
        np.testing.assert_allclose(effective_density(laplace(1.3, 0.2), x), effective_density(laplace(1.3, 0.2), -x))
        ep = EffectivePrior(DiscretePrior(Constellation.qpsk()), GaussianInputNoise(0.1))
        z = np.array([0.3 + 0.7j, 1.2 - 0.1j])
        np.testing.assert_allclose(effective_density(ep, z), effective_density(ep, -z))

    def test_stable_form_matches_raw(self):
        x = np.linspace(-5, 5, 41)
        np.testing.assert_allclose(np.exp(laplace_gauss_logpdf(x, 1.5, 0.3)), laplace_gauss_pdf_raw(x, 1.5, 0.3),
                                   rtol=1e-10)

    def test_no_overflow_far_out(self):
        val = laplace_gauss_logpdf(np.array([1e4, -1e4]), 1.0, 0.1)
        np.testing.assert_allclose(val, np.log(0.5) + 0.05 - 1e4, rtol=1e-10)

    @pytest.mark.parametrize("ep", [
        laplace(1.0, 0.1),
        laplace(3.0, 0.01),
        EffectivePrior(BernoulliGaussPrior(0.05), GaussianInputNoise(0.01)),
        EffectivePrior(DiscretePrior(Constellation.bpsk()), GaussianInputNoise(0.2), "real"),
    ])
    def test_integrates_to_one(self, ep):
        # widest mixture component sets the scale; overall sd understates the BG tail
        mix = ep.mixture()
        sd = np.sqrt(ep.var if mix is None else max(ep.var, mix[1].max()))
        pieces = [-12 * sd, -1, 0, 1, 12 * sd]
        total = sum(integrate.quad(lambda x: effective_density(ep, x), a, b, limit=200, epsabs=1e-12)[0]
                    for a, b in zip(pieces[:-1], pieces[1:]))
        assert abs(total - 1) < 1e-6

    def test_atomic_prior_rejected(self):
        ep = EffectivePrior(DiscretePrior(Constellation.qpsk()))
        with pytest.raises(AtomicDensityError):
            effective_density(ep, 0.0)
        means, variances, weights = ep.mixture()
        np.testing.assert_allclose(weights, 0.25)


class TestMoments:
    def test_examples(self):
        ep = EffectivePrior(DiscretePrior(Constellation.qpsk()), GaussianInputNoise(0.1))
        mean, var = effective_moments(ep)
        assert abs(mean) < 1e-15 and var == pytest.approx(1.1)
        assert effective_moments(laplace(2.0)) == (0.0, 0.5)
        ep = EffectivePrior(BernoulliGaussPrior(0.05), GaussianInputNoise(0.01))
        assert effective_moments(ep) == pytest.approx((0.0, 0.06))

    @pytest.mark.parametrize("prior,nt,field", [
        (DiscretePrior(Constellation.qam(16)), 0.05, "complex"),
        (LaplacePrior(1.5), 0.1, "real"),
        (BernoulliGaussPrior(0.1), 0.02, "real"),
    ])
    def test_monte_carlo(self, prior, nt, field):
        n = 10**6
        s = model.gen_signal(prior, n, 11)
        if field == "complex":
            s = s.astype(complex)
        x = model.apply_input_noise(s, nt, 12)
        ep = EffectivePrior(prior, GaussianInputNoise(nt), field)
        mean, var = ep.mean, ep.var
        se_mean = np.sqrt(var / n)
        dev = np.abs(x - np.mean(x)) ** 2
        se_var = np.std(dev) / np.sqrt(n)
        assert abs(np.mean(x) - mean) < 3 * np.sqrt(2) * se_mean
        assert abs(np.mean(dev) - var) < 3 * se_var

    def test_complex_track_rejects_continuous(self):
        with pytest.raises(ValueError):
            EffectivePrior(LaplacePrior(1.0), field="complex")
