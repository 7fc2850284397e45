"""Signal priors p(s), input-noise models p(x|s) and the effective prior p(x).

The effective prior is the convolution of the signal prior with the input
noise. For discrete and Bernoulli-Gaussian signals under Gaussian input noise
it is a Gaussian mixture; for a Laplace signal it has a closed form in terms of
the scaled complementary error function.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import special

from ampi.model import Constellation


@dataclass(frozen=True)
class DiscretePrior:
    constellation: Constellation


@dataclass(frozen=True)
class LaplacePrior:
    """p(s) = (lam/2) exp(-lam |s|)."""

    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("Laplace rate must be positive")


@dataclass(frozen=True)
class BernoulliGaussPrior:
    """Zero with probability 1 - kappa, standard normal otherwise."""

    kappa: float

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")


@dataclass(frozen=True)
class GaussianInputNoise:
    """x = s + e with e ~ N(0, nt) (CN(0, nt) on the complex track).

    Other input-noise models plug in by providing the same attributes the
    denoisers read (currently only ``nt``).
    """

    nt: float

    def __post_init__(self):
        if self.nt < 0:
            raise ValueError("input-noise variance must be nonnegative")


class AtomicDensityError(ValueError):
    """The effective prior has point masses, so it has no density."""


@dataclass(frozen=True, eq=False)
class EffectivePrior:
    prior: object
    noise: GaussianInputNoise = GaussianInputNoise(0.0)
    field: str = ""

    def __post_init__(self):
        if not self.field:
            field = "complex" if isinstance(self.prior, DiscretePrior) else "real"
            object.__setattr__(self, "field", field)
        if self.field not in ("real", "complex"):
            raise ValueError(f"field must be 'real' or 'complex', got {self.field!r}")
        if self.field == "complex" and not isinstance(self.prior, DiscretePrior):
            raise ValueError("continuous priors are only supported on the real track")

    @property
    def nt(self):
        return self.noise.nt

    @cached_property
    def moments(self):
        return effective_moments(self)

    @property
    def mean(self):
        return self.moments[0]

    @property
    def var(self):
        return self.moments[1]

    def mixture(self):
        """(means, variances, weights) when p(x) is a Gaussian mixture, else None."""
        nt = self.nt
        if isinstance(self.prior, DiscretePrior):
            c = self.prior.constellation
            means = c.points if self.field == "complex" else c.points.real
            return means, np.full(len(c), float(nt)), c.probs
        if isinstance(self.prior, BernoulliGaussPrior):
            k = self.prior.kappa
            return np.zeros(2), np.array([nt, 1.0 + nt]), np.array([1.0 - k, k])
        return None

    def signal_mixture(self):
        """Mixture description of p(s) itself (input noise removed)."""
        return EffectivePrior(self.prior, GaussianInputNoise(0.0), self.field).mixture()


def effective_moments(ep):
    """Exact (mean, variance) of x = s + e."""
    prior, nt = ep.prior, ep.nt
    if isinstance(prior, DiscretePrior):
        c = prior.constellation
        mean = c.mean if ep.field == "complex" else c.mean.real
        var = c.variance if ep.field == "complex" else float(np.sum(c.probs * (c.points.real - mean) ** 2))
        return mean, var + nt
    if isinstance(prior, LaplacePrior):
        return 0.0, 2.0 / prior.lam**2 + nt
    if isinstance(prior, BernoulliGaussPrior):
        return 0.0, prior.kappa + nt
    raise TypeError(f"unsupported prior {type(prior).__name__}")


def q_function(x):
    """Gaussian tail probability Q(x) = P(N(0,1) > x)."""
    return 0.5 * special.erfc(np.asarray(x) / np.sqrt(2.0))


def log_erfcx(x):
    """log of exp(x^2) erfc(x), finite for every real x."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = np.log(special.erfcx(x[pos]))
    neg = ~pos
    out[neg] = x[neg] ** 2 + np.log(special.erfc(x[neg]))
    return out


def laplace_gauss_logpdf(x, lam, v):
    """log density of Laplace(lam) convolved with N(0, v), v > 0.

    Written with erfcx so that exp(+-lam x) never multiplies a vanishing
    Q-function; see :func:`laplace_gauss_pdf_raw` for the textbook form.
    """
    x = np.asarray(x, dtype=float)
    sq = np.sqrt(2.0 * v)

    def branch(u, shift):
        # -x^2/2v + log erfcx(u); for u < 0 the u^2 and x^2 terms cancel exactly to shift
        with np.errstate(divide="ignore", over="ignore"):
            neg = shift + np.log(special.erfc(np.minimum(u, 0.0)))
            pos = log_erfcx(np.maximum(u, 0.0)) - x**2 / (2.0 * v)
        return np.where(u < 0, neg, pos)

    a = branch((x + lam * v) / sq, lam * x + 0.5 * lam**2 * v)
    b = branch((lam * v - x) / sq, 0.5 * lam**2 * v - lam * x)
    return np.log(lam / 4.0) + np.logaddexp(a, b)


def laplace_gauss_pdf_raw(x, lam, v):
    """Unscaled closed form with Q-functions; overflows for large |lam x|."""
    x = np.asarray(x, dtype=float)
    sd = np.sqrt(v)
    return (lam / 2.0) * np.exp(lam**2 * v / 2.0) * (
        np.exp(lam * x) * q_function((x + lam * v) / sd)
        + np.exp(-lam * x) * (1.0 - q_function((x - lam * v) / sd))
    )


def _gauss_pdf(x, mean, var, field):
    d2 = np.abs(x - mean) ** 2
    if field == "complex":
        return np.exp(-d2 / var) / (np.pi * var)
    return np.exp(-d2 / (2.0 * var)) / np.sqrt(2.0 * np.pi * var)


def effective_density(ep, x):
    """Density of the effective prior p(x) at x."""
    x = np.asarray(x)
    prior, nt = ep.prior, ep.nt
    if isinstance(prior, LaplacePrior):
        if nt == 0:
            return 0.5 * prior.lam * np.exp(-prior.lam * np.abs(x))
        return np.exp(laplace_gauss_logpdf(x, prior.lam, nt))
    means, variances, weights = ep.mixture()
    if np.any(variances == 0):
        raise AtomicDensityError(
            "effective prior has point masses (zero input noise); use EffectivePrior.mixture() for the mass function"
        )
    xe = x[..., None]
    return np.sum(weights * _gauss_pdf(xe, means, variances, ep.field), axis=-1)
