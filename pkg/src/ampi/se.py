"""State evolution: the MSE functional, its recursion, fixed points and thresholds.

Psi(sigma2, gamma2) is the MSE of a denoiser run at threshold gamma2 on
z = x + N(0, sigma2). It is evaluated as

    E_z[ |F(z, gamma2) - F*(z, sigma2)|^2 + G*(z, sigma2) ]

with F*, G* the exact posterior moments, so only a quadrature over z is
needed. Gaussian-mixture effective priors use Gauss-Hermite rules per mixture
component on the complex track; the real track uses composite Gauss-Legendre
panels against the closed-form marginal of z, refined geometrically around the
points where the integrand changes quickly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from ampi.denoiser import LaplaceDenoiser, make_denoiser
from ampi.errors import NumericalFailure
from ampi.priors import (
    BernoulliGaussPrior,
    EffectivePrior,
    GaussianInputNoise,
    LaplacePrior,
    laplace_gauss_logpdf,
)

GH_NODES = 100
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def _hermite(n):
    # probabilists' rule: integrates against the standard normal density
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / np.sqrt(2.0 * np.pi)


_GH = {}


def _gh(n):
    if n not in _GH:
        _GH[n] = _hermite(n)
    return _GH[n]


def _complex_mixture_expectation(func, ep, sigma2, nodes):
    """E[func(z)] for z = x + CN(0, sigma2), x from a complex Gaussian mixture (product Gauss-Hermite)."""
    means, variances, weights = ep.mixture()
    u, w = _gh(nodes)
    ww = w[:, None] * w[None, :]
    total = 0.0
    for mu, v, p in zip(means, variances, weights):
        if p == 0:
            continue
        s = np.sqrt((v + sigma2) / 2.0)
        total += p * np.sum(ww * func(mu + s * (u[:, None] + 1j * u[None, :])))
    return float(total)


def _panels_around(centers, small, reach, per_octave=4):
    """Breakpoints refined geometrically around each center, from ``small`` out to ``reach``."""
    octaves = max(np.log2(reach / small), 1.0)
    radii = small * np.exp2(np.linspace(0.0, octaves, int(np.ceil(octaves * per_octave)) + 1))
    pts = [np.asarray(centers, dtype=float)[:, None] + sign * radii for sign in (-1.0, 1.0)]
    pts = np.unique(np.concatenate([np.ravel(p) for p in pts] + [np.asarray(centers, dtype=float)]))
    return pts


def _real_density(ep, sigma2):
    """Log density of z = x + N(0, sigma2) on the real track, with its natural centers and reach."""
    if isinstance(ep.prior, LaplacePrior):
        lam, v = ep.prior.lam, ep.nt + sigma2
        return (lambda z: laplace_gauss_logpdf(z, lam, v)), [0.0], 60.0 / lam + 40.0 * np.sqrt(v)
    means, variances, weights = ep.mixture()
    means = np.real(means)
    tot = variances + sigma2
    keep = weights > 0
    means, tot, logw = means[keep], tot[keep], np.log(weights[keep])

    def logpdf(z):
        d = z[..., None] - means
        return np.logaddexp.reduce(logw - 0.5 * np.log(2 * np.pi * tot) - d * d / (2 * tot), axis=-1)

    return logpdf, list(means), 40.0 * np.sqrt(tot.max()) + np.max(np.abs(means))


def _real_expectation(func, ep, sigma2, features):
    """E[func(z)] by composite Gauss-Legendre over z against the closed-form marginal.

    ``features`` lists (location, width) pairs where func changes quickly;
    panels are refined geometrically around them and around the density's
    own centers.
    """
    logpdf, centers, reach = _real_density(ep, sigma2)
    widths = [w for _, w in features] + [np.sqrt(ep.nt + sigma2)]
    small = 1e-3 * min(widths)
    locs = list(centers) + [c for c, _ in features]
    breaks = _panels_around(locs, small, reach + max(abs(c) for c in locs))
    lo, hi = breaks[:-1, None], breaks[1:, None]
    half = 0.5 * (hi - lo)
    z = 0.5 * (hi + lo) + half * _GL_NODES
    return float(np.sum(func(z) * np.exp(logpdf(z)) * half * _GL_WEIGHTS))


def _expectation(func, ep, sigma2, features=(), nodes=GH_NODES):
    if ep.field == "complex":
        return _complex_mixture_expectation(func, ep, sigma2, nodes)
    return _real_expectation(func, ep, sigma2, list(features))


def psi(sigma2, gamma2, ep, d=None, nodes=GH_NODES):
    """MSE of denoiser ``d`` at threshold gamma2 when the true noise variance is sigma2.

    ``d=None`` means the matched posterior-mean denoiser for ``ep``; then
    gamma2 is ignored in favour of sigma2 only when they are equal.
    """
    if not (sigma2 > 0 and gamma2 > 0):
        raise ValueError("variances must be positive")
    exact = make_denoiser(ep)
    if d is None and gamma2 == sigma2:
        return _expectation(lambda z: exact.G(z, sigma2), ep, sigma2, [(0.0, np.sqrt(sigma2))], nodes)
    d = exact if d is None else d

    def integrand(z):
        f_true, g_true = exact.FG(z, sigma2)
        return np.abs(d.F(z, gamma2) - f_true) ** 2 + g_true

    features = [(0.0, np.sqrt(sigma2)), (0.0, np.sqrt(gamma2))]
    if isinstance(d, LaplaceDenoiser):
        width = np.sqrt(d.nt + gamma2)
        features += [(d.lam * gamma2, width), (-d.lam * gamma2, width)]
    val = _expectation(integrand, ep, sigma2, features, nodes)
    if not np.isfinite(val):
        raise NumericalFailure("non-finite MSE functional", {"sigma2": sigma2, "gamma2": gamma2})
    return val


def psi_matched(sigma2, ep, d=None):
    return psi(sigma2, sigma2, ep, d)


# ---------------------------------------------------------------------------
# Recursion and fixed points


@dataclass
class SeTrace:
    sigma2: list
    converged: bool
    fixed_point: float | None


def se_recursion(beta, n0, ep, d=None, t_max=100, tol=1e-10):
    """sigma2_{t+1} = n0 + beta Psi(sigma2_t, sigma2_t) from sigma2_1 = n0 + beta Var[X]."""
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    sig = [n0 + beta * ep.var]
    converged = False
    for _ in range(t_max - 1):
        if beta == 0:
            nxt = n0
        else:
            nxt = n0 + beta * psi(sig[-1], sig[-1], ep, d)
        sig.append(float(nxt))
        if abs(sig[-1] - sig[-2]) <= tol * sig[-2]:
            converged = True
            break
    return SeTrace(sigma2=sig, converged=converged, fixed_point=sig[-1] if converged else None)


def fixed_points(beta, n0, ep, d=None, grid_points=400, rtol=1e-10):
    """All roots of n0 + beta Psi(s, s) - s found as sign changes on a log grid."""
    var = ep.var
    lo, hi = 1e-8 * var, 2.0 * (n0 + beta * var)
    if beta == 0:
        return [float(n0)]

    def phi(s):
        return n0 + beta * psi(s, s, ep, d) - s

    grid = np.geomspace(lo, hi, grid_points)
    vals = np.array([phi(s) for s in grid])
    roots = []
    for k in range(grid_points - 1):
        a, b = vals[k], vals[k + 1]
        if a == 0:
            roots.append(float(grid[k]))
        elif a * b < 0:
            roots.append(float(optimize.brentq(phi, grid[k], grid[k + 1], rtol=rtol, xtol=1e-300)))
    if vals[-1] == 0:
        roots.append(float(grid[-1]))
    return sorted(roots)


# ---------------------------------------------------------------------------
# Thresholds and uniqueness regimes


@dataclass
class ThresholdReport:
    beta_min: float
    beta_max: float
    n0_min: float | None = None
    n0_max: float | None = None
    beta: float | None = None
    regime: str | None = None
    # log grid over sigma2 and dPsi/dsigma2 on it, kept for noise thresholds at other beta
    grid: np.ndarray | None = field(default=None, repr=False)
    slopes: np.ndarray | None = field(default=None, repr=False)


def dpsi(sigma2, ep, d=None, rel_step=1e-4):
    """d Psi(s, s)/ds by Richardson-extrapolated central differences."""

    def central(h):
        up = psi(sigma2 * (1 + h), sigma2 * (1 + h), ep, d)
        dn = psi(sigma2 * (1 - h), sigma2 * (1 - h), ep, d)
        return (up - dn) / (2.0 * sigma2 * h)

    return (4.0 * central(rel_step / 2) - central(rel_step)) / 3.0


def _maximize_log(func, lo, hi, points):
    """Maximum of func over [lo, hi] on a log grid, refined around the best cell."""
    grid = np.geomspace(lo, hi, points)
    vals = np.array([func(s) for s in grid])
    k = int(np.argmax(vals))
    a = np.log(grid[max(k - 1, 0)])
    b = np.log(grid[min(k + 1, points - 1)])
    res = optimize.minimize_scalar(lambda t: -func(np.exp(t)), bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-10})
    best = max(vals[k], -res.fun)
    arg = grid[k] if vals[k] >= -res.fun else float(np.exp(res.x))
    return float(best), float(arg), grid, vals


def thresholds(ep, d=None, beta=None, span=(1e-8, 1e6), points=200):
    """Recovery thresholds of the matched (or given) denoiser, plus noise thresholds at ``beta``.

    beta_max is 1 / max Psi(s,s)/s and beta_min is 1 / max dPsi/ds, both over
    s in ``span`` x Var[X]. With ``beta`` given, n0_min/n0_max are the
    smallest/largest s - beta Psi(s,s) over the solutions of beta dPsi/ds = 1;
    they stay None when that set is empty.
    """
    var = ep.var
    lo, hi = span[0] * var, span[1] * var
    ratio_max, _, _, _ = _maximize_log(lambda s: psi(s, s, ep, d) / s, lo, hi, points)
    slope_max, _, grid, slopes = _maximize_log(lambda s: dpsi(s, ep, d), lo, hi, points)
    report = ThresholdReport(beta_min=1.0 / slope_max, beta_max=1.0 / ratio_max, grid=grid, slopes=slopes)
    if beta is not None:
        report = noise_thresholds(report, beta, ep, d)
    return report


def noise_thresholds(report, beta, ep, d=None):
    """Copy of ``report`` with n0_min/n0_max at ``beta``, reusing its slope grid."""
    grid, slopes = report.grid, report.slopes
    h = beta * slopes - 1.0
    crit = []
    for k in range(len(grid) - 1):
        if h[k] == 0:
            crit.append(grid[k])
        elif h[k] * h[k + 1] < 0:
            crit.append(optimize.brentq(lambda s: beta * dpsi(s, ep, d) - 1.0, grid[k], grid[k + 1], rtol=1e-10))
    noise = [s - beta * psi(s, s, ep, d) for s in crit]
    return replace(report, beta=beta,
                   n0_min=float(min(noise)) if noise else None,
                   n0_max=float(max(noise)) if noise else None)


def regime(beta, n0, report):
    """Which uniqueness case applies, or 'non-unique' when none is guaranteed."""
    if beta <= report.beta_min:
        return "unique-1"
    below = report.n0_min is not None and n0 < report.n0_min
    above = report.n0_max is None or n0 > report.n0_max
    if report.n0_min is None:
        # no stationary point of s - beta Psi: the fixed-point map is monotone
        below = above = True
    if beta < report.beta_max and (below or above):
        return "unique-2"
    if beta >= report.beta_max and above:
        return "unique-3"
    return "non-unique"


# ---------------------------------------------------------------------------
# SURE-tuned Laplace denoiser on a Bernoulli-Gaussian source


def _bg_prior(kappa, nt):
    return EffectivePrior(BernoulliGaussPrior(kappa), GaussianInputNoise(nt))


def tuned_psi(sigma2, ep, nt, start=None):
    """min over (lambda, gamma2) of the Laplace denoiser's MSE on ep; returns (mse, lam, gamma2)."""
    sd = np.sqrt(sigma2)

    def obj(p):
        return psi(sigma2, np.exp(p[0]), ep, LaplaceDenoiser(float(np.exp(p[1])), nt))

    if start is None:
        best = None
        for g in np.geomspace(0.3, 3.0, 5) * sigma2:
            for lam in np.geomspace(0.3, 30.0, 9) / sd:
                val = obj([np.log(g), np.log(lam)])
                if best is None or val < best[0]:
                    best = (val, np.log(g), np.log(lam))
        x0 = best[1:]
    else:
        x0 = [np.log(start[1]), np.log(start[0])]
    res = optimize.minimize(obj, x0, method="Nelder-Mead",
                            options={"xatol": 1e-6, "fatol": 1e-14 * sigma2, "maxiter": 2000})
    return float(res.fun), float(np.exp(res.x[1])), float(np.exp(res.x[0]))


@dataclass
class TunedSePrediction:
    sigma2: list
    lam: float
    gamma2: float
    mse_s: float
    rsnr_db: float


def tuned_se_prediction(beta, n0, kappa, nt, t_max=200, tol=1e-9):
    """Predicted RSNR of SURE-tuned AMP with a Laplace denoiser on a Bernoulli-Gaussian signal.

    The recursion uses the best (lambda, gamma2) at every step; the final s
    estimate is the Laplace MMSE map at the last parameters.
    """
    ep = _bg_prior(kappa, nt)
    sig = [n0 + beta * ep.var]
    start = None
    lam = gamma2 = None
    for _ in range(t_max):
        mse, lam, gamma2 = tuned_psi(sig[-1], ep, nt, start)
        start = (lam, gamma2)
        sig.append(n0 + beta * mse)
        if abs(sig[-1] - sig[-2]) <= tol * sig[-2]:
            break
    # parameters used on the final decoupled output
    _, lam, gamma2 = tuned_psi(sig[-1], ep, nt, start)
    signal = _bg_prior(kappa, 0.0)
    mse_s = psi(nt + sig[-1], nt + gamma2, signal, LaplaceDenoiser(lam, 0.0))
    return TunedSePrediction(sigma2=sig, lam=lam, gamma2=gamma2, mse_s=mse_s,
                             rsnr_db=float(10 * np.log10(kappa / mse_s)))
