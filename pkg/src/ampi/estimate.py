"""Second stage of AMPI: estimate s from the decoupled output z.

MAP detection for constellations, MMSE estimation for Laplace signals, and the
SURE-tuned loop that picks (lambda, gamma2) per iteration from the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ampi.amp import DecoupledOutput, cbamp_run, estimate_sigma2_residual
from ampi.denoiser import laplace_gauss_F, laplace_gauss_FG, make_denoiser
from ampi.errors import AmpDivergence, NumericalFailure
from ampi.priors import DiscretePrior, LaplacePrior


@dataclass
class AmpiResult:
    s_hat: np.ndarray
    decoupled: DecoupledOutput
    tuned_params: list = field(default_factory=list)


def map_detect(z, sigma2, c, nt, field="complex"):
    """Most probable constellation symbol given z = s + Gaussian(nt + sigma2).

    Ties go to the lowest index in the constellation's point order.
    """
    if len(c) == 0:
        raise ValueError("empty constellation")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    z = np.asarray(z)
    points = c.points if field == "complex" else c.points.real
    v = nt + sigma2
    d2 = np.abs(z[..., None] - points) ** 2
    with np.errstate(divide="ignore"):
        logp = np.log(c.probs)
    score = logp - (d2 / v if field == "complex" else d2 / (2.0 * v))
    idx = np.argmax(score, axis=-1)
    out = c.points[idx]
    return out if field == "complex" else out.real


def mmse_estimate(z, sigma2, prior, nt):
    """E[S | z] for a Laplace signal seen through Gaussian noise of variance nt + sigma2."""
    lam = prior.lam if isinstance(prior, LaplacePrior) else float(prior)
    if not sigma2 > 0 and not nt > 0:
        raise ValueError("nt + sigma2 must be positive")
    return laplace_gauss_F(z, nt + sigma2, lam, 0.0)


def ampi_run(inst, ep, mode="map", t_max=100, stop_tol=1e-6, damping=0.0, denoiser=None):
    """Run the AMP engine with the denoiser for ``ep``, then detect or estimate s."""
    d = denoiser if denoiser is not None else make_denoiser(ep)
    out = cbamp_run(inst.y, inst.H, d, inst.n0, t_max=t_max, stop_tol=stop_tol, ep=ep, damping=damping)
    if mode == "map":
        if not isinstance(ep.prior, DiscretePrior):
            raise ValueError("MAP detection needs a discrete prior")
        s_hat = map_detect(out.z, out.sigma2_hat, ep.prior.constellation, ep.nt, ep.field)
    elif mode == "mmse":
        if not isinstance(ep.prior, LaplacePrior):
            raise ValueError("MMSE estimation is implemented for Laplace priors")
        s_hat = mmse_estimate(out.z, out.sigma2_hat, ep.prior, ep.nt)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return AmpiResult(s_hat=s_hat, decoupled=out)


# ---------------------------------------------------------------------------
# SURE tuning


def sure_objective(z, r, gamma2, lam, nt=0.0):
    """Unbiased estimate of the per-entry MSE of the Laplace denoiser at (gamma2, lam).

    The effective noise variance of z is estimated as ||r||^2 / M. The
    divergence of F is G / gamma2, which is what enters the correction term.
    """
    sigma2 = estimate_sigma2_residual(r)
    f, g = laplace_gauss_FG(z, gamma2, lam, nt)
    return float(np.mean((f - z) ** 2) + sigma2 + 2.0 * sigma2 * (np.mean(g) / gamma2 - 1.0))


def _sure_grid(z, sigma2, gammas, lams, nt, chunk=64):
    """SURE over the outer product gammas x lams, evaluated in memory-bounded chunks."""
    gg, ll = np.meshgrid(gammas, lams, indexing="ij")
    gg = gg.ravel()
    ll = ll.ravel()
    out = np.empty(gg.size)
    for lo in range(0, gg.size, chunk):
        g2 = gg[lo:lo + chunk, None]
        lam = ll[lo:lo + chunk, None]
        f, g = laplace_gauss_FG(z[None, :], g2, lam, nt)
        out[lo:lo + chunk] = (
            np.mean((f - z) ** 2, axis=1) + sigma2 + 2.0 * sigma2 * (np.mean(g, axis=1) / g2[:, 0] - 1.0)
        )
    return out.reshape(len(gammas), len(lams))


@dataclass(frozen=True)
class TuningGrid:
    """Log-spaced search box, relative to the current noise estimate sigma2.

    lambda spans ``lam_range / sqrt(sigma2)`` and gamma2 spans
    ``gamma_range * sigma2``, each with ``points`` values, followed by
    ``refinements`` rounds of 3x3 local search at halving spacing.
    """

    lam_range: tuple = (0.01, 100.0)
    gamma_range: tuple = (0.1, 10.0)
    points: int = 40
    refinements: int = 2
    window: int = 4


def tune_params(z, r, nt=0.0, grid=TuningGrid(), start=None):
    """(lambda, gamma2) minimizing the SURE estimate.

    With ``start`` = (i, j) grid indices from a previous call, only a
    (2*window+1)^2 neighbourhood is scanned first; the full grid is used when
    the best point lands on that neighbourhood's edge. Returns
    (lam, gamma2, objective, (i, j)).
    """
    z = np.asarray(z, dtype=float)
    sigma2 = estimate_sigma2_residual(r)
    if not sigma2 > 0:
        raise NumericalFailure("zero residual: noise level cannot be estimated", {"sigma2": sigma2})
    log_l = np.linspace(np.log(grid.lam_range[0]), np.log(grid.lam_range[1]), grid.points) - 0.5 * np.log(sigma2)
    log_g = np.linspace(np.log(grid.gamma_range[0]), np.log(grid.gamma_range[1]), grid.points) + np.log(sigma2)

    def scan(gi, li):
        vals = _sure_grid(z, sigma2, np.exp(log_g[gi]), np.exp(log_l[li]), nt)
        vals = np.where(np.isnan(vals), np.inf, vals)
        if not np.any(np.isfinite(vals)):
            raise NumericalFailure("SURE objective is not finite anywhere on the grid", {"sigma2": sigma2})
        a, b = np.unravel_index(np.argmin(vals), vals.shape)
        return gi[a], li[b], vals[a, b]

    full = np.arange(grid.points)
    i = j = None
    if start is not None:
        w = grid.window
        gi = np.arange(max(start[0] - w, 0), min(start[0] + w + 1, grid.points))
        li = np.arange(max(start[1] - w, 0), min(start[1] + w + 1, grid.points))
        i, j, best = scan(gi, li)
        interior = (i not in (gi[0], gi[-1]) or i in (0, grid.points - 1)) and (
            j not in (li[0], li[-1]) or j in (0, grid.points - 1)
        )
        if not interior:
            i = None
    if i is None:
        i, j, best = scan(full, full)
    lg, ll = log_g[i], log_l[j]
    step_g = log_g[1] - log_g[0]
    step_l = log_l[1] - log_l[0]
    for _ in range(grid.refinements):
        step_g *= 0.5
        step_l *= 0.5
        cand_g = np.clip(lg + step_g * np.array([-1.0, 0.0, 1.0]), log_g[0], log_g[-1])
        cand_l = np.clip(ll + step_l * np.array([-1.0, 0.0, 1.0]), log_l[0], log_l[-1])
        vals = _sure_grid(z, sigma2, np.exp(cand_g), np.exp(cand_l), nt)
        vals = np.where(np.isnan(vals), np.inf, vals)
        a, b = np.unravel_index(np.argmin(vals), vals.shape)
        if vals[a, b] < best:
            best, lg, ll = vals[a, b], cand_g[a], cand_l[b]
    return float(np.exp(ll)), float(np.exp(lg)), float(best), (int(i), int(j))


def ampi_sure_run(inst, t_max=100, nt=None, stop_tol=1e-6, grid=TuningGrid(), warm_start=True):
    """AMP with a Laplace denoiser whose (lambda, gamma2) are SURE-tuned every iteration.

    ``nt`` defaults to the instance's input-noise variance; pass 0 to ignore
    input noise. The final estimate of s is the MMSE map at the last tuned
    parameters.
    """
    nt = inst.nt if nt is None else nt
    y, H = inst.y, inst.H
    m, n = H.shape
    beta = n / m
    HT = H.T
    x_hat = np.zeros(n)
    r = y.copy()
    trace, params = [], []
    start = None
    converged = False
    prev_sigma2 = None
    for t in range(1, t_max + 1):
        z = x_hat + HT @ r
        lam, gamma2, obj, idx = tune_params(z, r, nt, grid, start if warm_start else None)
        start = idx
        f, g = laplace_gauss_FG(z, gamma2, lam, nt)
        mean_g = float(np.mean(g))
        r_new = y - H @ f + beta * (r / gamma2) * mean_g
        sigma2 = estimate_sigma2_residual(r)
        trace.append({"t": t, "gamma2": gamma2, "lambda": lam, "sure": obj,
                      "mean_G": mean_g, "residual_energy": float(r_new @ r_new)})
        params.append((lam, gamma2))
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(r_new))):
            raise AmpDivergence(f"SURE-tuned AMP diverged at iteration {t}", trace)
        x_hat, r = f, r_new
        if prev_sigma2 is not None and abs(sigma2 - prev_sigma2) <= stop_tol * prev_sigma2:
            converged = True
            break
        prev_sigma2 = sigma2
    lam, gamma2 = params[-1]
    s_hat = mmse_estimate(z, gamma2, lam, nt)
    out = DecoupledOutput(z=z, sigma2_hat=gamma2, trace=trace, x_hat=x_hat, r=r,
                          iterations=len(trace), converged=converged)
    return AmpiResult(s_hat=s_hat, decoupled=out, tuned_params=params)
