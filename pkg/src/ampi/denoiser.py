"""Scalar posterior-mean (F) and posterior-variance (G) maps.

F(z, tau) = E[X | z] and G(z, tau) = E[|X - F|^2 | z] for the scalar channel
z = x + w with w ~ N(0, tau) (CN(0, tau) on the complex track) and x drawn from
an effective prior. Closed forms exist for Gaussian mixtures (discrete or
Bernoulli-Gaussian signals with Gaussian input noise) and for Laplace signals
with Gaussian input noise. :func:`quadrature_FG` is an independent numerical
oracle used to validate both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from ampi.errors import NumericalFailure
from ampi.priors import (
    BernoulliGaussPrior,
    DiscretePrior,
    EffectivePrior,
    GaussianInputNoise,
    LaplacePrior,
)

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def erfcx(x):
    """Scaled complementary error function exp(x^2) erfc(x)."""
    return special.erfcx(x)


def _positive(name, value):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# Laplace signal with Gaussian input noise


def _laplace_parts(z, tau, lam, nt):
    """Return (eta, 1 - eta^2, 1/gamma) for the Laplace-Gaussian posterior.

    Only |z| enters: with alpha >= 0 the ratio r = erfcx(alpha)/erfcx(beta) is
    formed without evaluating erfcx at large negative arguments, so eta is an
    exact -1 (times sign z) deep in the tails rather than inf/inf.
    """
    z, tau, lam, nt = np.broadcast_arrays(
        np.asarray(z, dtype=float), np.asarray(tau, dtype=float),
        np.asarray(lam, dtype=float), np.asarray(nt, dtype=float),
    )
    v = nt + tau
    sq = np.sqrt(2.0 * v)
    az = np.abs(z)
    a = (az + lam * v) / sq
    b = (lam * v - az) / sq
    big = special.erfcx(a)
    r = np.empty(a.shape)
    pos = b >= 0
    r[pos] = big[pos] / special.erfcx(b[pos])
    neg = ~pos
    # erfcx(b) = exp(b^2) erfc(b) for b < 0; keep exp(-b^2) in the numerator
    r[neg] = big[neg] * np.exp(-b[neg] ** 2) / special.erfc(b[neg])
    eta = np.sign(z) * (r - 1.0) / (r + 1.0)
    one_m_eta2 = 4.0 * r / (1.0 + r) ** 2
    inv_gamma = r / (big * (1.0 + r))
    return eta, one_m_eta2, inv_gamma


def _scalar(out):
    return out[()] if isinstance(out, np.ndarray) and out.ndim == 0 else out


def laplace_gauss_eta(z, tau, lam, nt):
    """The odd score factor eta(z, tau) in [-1, 1]; tau may be 0 when nt > 0."""
    return _scalar(_laplace_parts(z, tau, lam, nt)[0])


def laplace_gauss_F(z, tau, lam, nt):
    """Posterior mean of x = s + e, s ~ Laplace(lam), e ~ N(0, nt), given z = x + N(0, tau)."""
    _positive("tau", tau)
    _positive("lambda", lam)
    if np.any(np.asarray(nt) < 0):
        raise ValueError("nt must be nonnegative")
    eta = _laplace_parts(z, tau, lam, nt)[0]
    return _scalar(np.asarray(z) + lam * tau * eta)


def laplace_gauss_G(z, tau, lam, nt):
    """Posterior variance matching :func:`laplace_gauss_F`."""
    _positive("tau", tau)
    _positive("lambda", lam)
    if np.any(np.asarray(nt) < 0):
        raise ValueError("nt must be nonnegative")
    _, one_m_eta2, inv_gamma = _laplace_parts(z, tau, lam, nt)
    tau = np.asarray(tau, dtype=float)
    g = tau + lam**2 * tau**2 * one_m_eta2 - 4.0 * inv_gamma * lam * tau**2 / np.sqrt(
        2.0 * np.pi * (nt + tau)
    )
    return _scalar(np.maximum(g, 0.0))


def laplace_gauss_FG(z, tau, lam, nt):
    eta, one_m_eta2, inv_gamma = _laplace_parts(z, tau, lam, nt)
    tau = np.asarray(tau, dtype=float)
    f = np.asarray(z) + lam * tau * eta
    g = tau + lam**2 * tau**2 * one_m_eta2 - 4.0 * inv_gamma * lam * tau**2 / np.sqrt(
        2.0 * np.pi * (nt + tau)
    )
    return f, np.maximum(g, 0.0)


# ---------------------------------------------------------------------------
# Gaussian mixtures (discrete constellations, Bernoulli-Gaussian)


def mixture_FG(z, tau, means, variances, weights, field="complex"):
    """Posterior mean and variance under a Gaussian-mixture prior.

    Component k contributes N(means[k], variances[k]); a zero variance is a
    point mass. Responsibilities are normalized in the log domain.
    """
    _positive("tau", tau)
    z = np.asarray(z)
    tau = np.asarray(tau, dtype=float)[..., None]
    means = np.asarray(means)
    variances = np.asarray(variances, dtype=float)
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(weights, dtype=float))
    zz = z[..., None]
    tot = variances + tau
    d2 = np.abs(zz - means) ** 2
    if field == "complex":
        score = logw - np.log(tot) - d2 / tot
    else:
        score = logw - 0.5 * np.log(tot) - d2 / (2.0 * tot)
    score = score - score.max(axis=-1, keepdims=True)
    w = np.exp(score)
    w /= w.sum(axis=-1, keepdims=True)
    rho = variances / tot
    m = means + rho * (zz - means)
    v = variances * tau / tot
    f = np.sum(w * m, axis=-1)
    second = np.sum(w * (np.abs(m) ** 2 + v), axis=-1)
    g = np.maximum(second - np.abs(f) ** 2, 0.0)
    return _scalar(f), _scalar(g)


def _constellation_mixture(c, nt, field):
    means = c.points if field == "complex" else c.points.real
    return means, np.full(len(c), float(nt)), c.probs


def mixture_F(z, tau, c, nt, field="complex"):
    """Posterior mean for a constellation prior under Gaussian input noise nt."""
    return mixture_FG(z, tau, *_constellation_mixture(c, nt, field), field)[0]


def mixture_G(z, tau, c, nt, field="complex"):
    """Posterior variance for a constellation prior under Gaussian input noise nt."""
    return mixture_FG(z, tau, *_constellation_mixture(c, nt, field), field)[1]


# ---------------------------------------------------------------------------
# Denoiser objects used by the AMP engine


class Denoiser:
    """Pair of elementwise maps F(z, tau), G(z, tau) for one effective prior."""

    field = "real"

    def FG(self, z, tau):
        raise NotImplementedError

    def F(self, z, tau):
        return self.FG(z, tau)[0]

    def G(self, z, tau):
        return self.FG(z, tau)[1]


@dataclass(frozen=True, eq=False)
class MixtureDenoiser(Denoiser):
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    field: str = "complex"

    def FG(self, z, tau):
        return mixture_FG(z, tau, self.means, self.variances, self.weights, self.field)

    @property
    def mean(self):
        return np.sum(self.weights * self.means)

    @property
    def var(self):
        second = np.sum(self.weights * (np.abs(self.means) ** 2 + self.variances))
        return float(second - abs(self.mean) ** 2)


@dataclass(frozen=True)
class LaplaceDenoiser(Denoiser):
    """Laplace(lam) signal observed through Gaussian input noise nt."""

    lam: float
    nt: float = 0.0
    field: str = "real"

    def FG(self, z, tau):
        _positive("tau", tau)
        f, g = laplace_gauss_FG(z, tau, self.lam, self.nt)
        return _scalar(f), _scalar(g)

    mean = 0.0

    @property
    def var(self):
        return 2.0 / self.lam**2 + self.nt


def make_denoiser(ep):
    """Matched (posterior mean/variance) denoiser for an effective prior."""
    if isinstance(ep.prior, LaplacePrior):
        return LaplaceDenoiser(ep.prior.lam, ep.nt)
    means, variances, weights = ep.mixture()
    return MixtureDenoiser(means, variances, weights, ep.field)


# ---------------------------------------------------------------------------
# Quadrature oracle

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def _panel_integrals(f, breaks):
    """Integrate f over consecutive [breaks[i], breaks[i+1]] panels (Gauss-Legendre)."""
    lo, hi = breaks[:-1, None], breaks[1:, None]
    half = 0.5 * (hi - lo)
    pts = 0.5 * (hi + lo) + half * _GL_NODES
    vals = f(pts)
    return np.sum(vals * (half * _GL_WEIGHTS), axis=(-1, -2))


def _continuous_part(ep):
    """Log density of the continuous part of p(s), its kinks, and where the posterior lives.

    The last entry maps (z, v) to the points around which the integrand over s
    carries its mass; the quadrature window is the union of intervals of
    +-15 standard deviations around them.
    """
    prior = ep.prior
    if isinstance(prior, LaplacePrior):
        lam = prior.lam
        return (
            lambda s: np.log(0.5 * lam) - lam * np.abs(s),
            [0.0],
            lambda z, v: [0.0, z, z - lam * v, z + lam * v],
        )
    if isinstance(prior, BernoulliGaussPrior):
        k = prior.kappa
        return (
            lambda s: np.log(k / _SQRT_2PI) - 0.5 * s**2,
            [],
            lambda z, v: [0.0, z, z / (1.0 + v)],
        )
    return None


def _atoms(ep):
    prior = ep.prior
    if isinstance(prior, DiscretePrior):
        c = prior.constellation
        pts = c.points if ep.field == "complex" else c.points.real
        return pts, c.probs
    if isinstance(prior, BernoulliGaussPrior):
        return np.zeros(1), np.array([1.0 - prior.kappa])
    return np.zeros(0), np.zeros(0)


def _window(centers, kinks, half):
    """Sorted breakpoints covering the union of [c - half, c + half], split at kinks."""
    spans = sorted((c - half, c + half) for c in centers)
    merged = [list(spans[0])]
    for lo, hi in spans[1:]:
        if lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    segments = []
    for lo, hi in merged:
        cuts = [lo] + [k for k in kinks if lo < k < hi] + [hi]
        segments.extend(zip(cuts[:-1], cuts[1:]))
    return segments


def _continuous_log_peak(log_density, centers, zi, v):
    pts = np.asarray(centers(zi, v), dtype=float)
    return float(np.max(log_density(pts) - (zi - pts) ** 2 / (2 * v)))


def _continuous_moments(log_density, kinks, centers, zi, tau, nt, panels, ref):
    """exp(-ref) (Z, E[x]Z, E[|x|^2]Z) from the continuous part of p(s), one scalar z."""
    v = nt + tau
    sd = np.sqrt(v)
    segments = _window(centers(zi, v), kinks, 15.0 * sd)
    rho = nt / v
    pv = nt * tau / v

    def integrand(s):
        lik = np.exp(log_density(s) - (zi - s) ** 2 / (2 * v) - ref) / np.sqrt(2 * np.pi * v)
        m = s + rho * (zi - s)
        return np.stack([lik, lik * m, lik * (m * m + pv)])

    total = np.zeros(3)
    for lo, hi in segments:
        # panels sized relative to the posterior scale, at least `panels` per segment
        count = max(panels, int(np.ceil(panels * (hi - lo) / (30.0 * sd))))
        total += _panel_integrals(integrand, np.linspace(lo, hi, count + 1))
    return total


def _moment_change(a, b, v):
    """Change in (mass, mean, variance) between two moment triples, on the posterior's own scale."""
    if not (a[0] > 0 and b[0] > 0):
        return np.inf
    ma, mb = a[1] / a[0], b[1] / b[0]
    va, vb = a[2] / a[0] - ma * ma, b[2] / b[0] - mb * mb
    return max(abs(b[0] - a[0]) / b[0], abs(mb - ma) / np.sqrt(v), abs(vb - va) / v)


def quadrature_FG(ep, z, tau, tol=1e-10, panels=200, max_doublings=3):
    """Posterior mean and variance of x by direct integration over s.

    Given s, x and z are jointly Gaussian, so the integral runs over the signal
    prior only: atoms are summed exactly (Gaussian convolution in precision
    form) and the continuous part of p(s) is integrated with composite
    Gauss-Legendre panels split at the density's kinks. The panel count is
    doubled until successive results agree to ``tol``.
    """
    _positive("tau", tau)
    z = np.atleast_1d(np.asarray(z))
    complex_track = ep.field == "complex"
    nt = ep.nt
    atoms, atom_p = _atoms(ep)
    cont = _continuous_part(ep)
    means = np.empty(z.shape, dtype=z.dtype if complex_track else float)
    variances = np.empty(z.shape)
    v = nt + tau
    for idx, zi in np.ndenumerate(z):
        tot = np.zeros(3, dtype=complex if complex_track else float)
        # common scale: every term is computed relative to exp(ref)
        if atoms.size:
            if complex_track:
                log_lik = -np.abs(zi - atoms) ** 2 / v
            else:
                log_lik = -((zi - atoms) ** 2) / (2 * v)
        ref = -np.inf
        if atoms.size:
            with np.errstate(divide="ignore"):
                ref = float(np.max(np.log(atom_p) + log_lik))
        if cont is not None:
            ref = max(ref, _continuous_log_peak(cont[0], cont[2], float(zi), v))
        if atoms.size:
            norm = np.pi * v if complex_track else np.sqrt(2 * np.pi * v)
            lik = np.exp(log_lik - ref) / norm
            if nt > 0:
                prec = 1.0 / nt + 1.0 / tau
                m = (atoms / nt + zi / tau) / prec
                pv = 1.0 / prec
            else:
                m, pv = atoms, 0.0
            tot += np.array([np.sum(atom_p * lik), np.sum(atom_p * lik * m),
                             np.sum(atom_p * lik * (np.abs(m) ** 2 + pv))])
        if cont is not None:
            prev = _continuous_moments(*cont, float(zi), tau, nt, panels, ref)
            for k in range(max_doublings + 1):
                cur = _continuous_moments(*cont, float(zi), tau, nt, panels * 2 ** (k + 1), ref)
                err = _moment_change(prev, cur, v)
                if err <= tol:
                    break
                prev = cur
            else:
                raise NumericalFailure("quadrature did not converge",
                                       {"z": zi, "tau": tau, "relative_change": err})
            tot = tot + cur
        if not tot[0] > 0:
            raise NumericalFailure("posterior normalizer vanished", {"z": zi, "tau": tau})
        f = tot[1] / tot[0]
        means[idx] = f
        variances[idx] = max((tot[2] / tot[0]).real - abs(f) ** 2, 0.0)
    return means, variances


def point_mass_prior(a, nt, field="complex"):
    """Effective prior of a single deterministic symbol a observed through input noise nt."""
    from ampi.model import Constellation

    return EffectivePrior(DiscretePrior(Constellation([a], [1.0])), GaussianInputNoise(nt), field)
