"""Comparison methods: noise whitening + AMP, nonlinear conjugate gradients on the
penalized least-squares objective, and support-oracle least squares."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ampi.amp import cbamp_run
from ampi.denoiser import laplace_gauss_F, laplace_gauss_eta, make_denoiser
from ampi.errors import NumericalFailure
from ampi.estimate import ampi_sure_run, map_detect
from ampi.model import SystemInstance
from ampi.priors import BernoulliGaussPrior, DiscretePrior, EffectivePrior, LaplacePrior, laplace_gauss_logpdf


@dataclass
class WhitenedSystem:
    H_tilde: np.ndarray
    y_tilde: np.ndarray
    effective_n0: float
    W: np.ndarray | None = None

    @property
    def is_identity(self):
        return self.W is None


def whiten(H, y, nt, n0, floor=1e-12):
    """Premultiply by W = sqrt(n0) Q^{-1/2}, Q = nt H H^H + n0 I.

    The whitened noise W (H e + n) then has covariance n0 I. With nt = 0 the
    system is returned unchanged (W = I).
    """
    if not n0 > 0:
        raise ValueError("n0 must be positive")
    H = np.asarray(H)
    y = np.asarray(y)
    if nt == 0:
        return WhitenedSystem(H, y, float(n0))
    Q = nt * (H @ H.conj().T) + n0 * np.eye(H.shape[0])
    if not np.allclose(Q, Q.conj().T, rtol=0, atol=1e-12 * np.abs(Q).max()):
        raise NumericalFailure("covariance is not Hermitian", {})
    lam, U = np.linalg.eigh(Q)
    if lam.min() < -floor * lam.max():
        raise NumericalFailure("covariance is indefinite", {"min_eigenvalue": float(lam.min())})
    lam = np.maximum(lam, floor * lam.max())
    W = np.sqrt(n0) * (U / np.sqrt(lam)) @ U.conj().T
    return WhitenedSystem(W @ H, W @ y, float(n0), W)


def whitened_amp_run(ws, prior, t_max=100, stop_tol=1e-6, damping=0.0, normalize=None):
    """Input-noise-free AMP for ``prior`` on the whitened system.

    Whitening shrinks the columns of H, so by default (whenever W is not the
    identity) the system is rescaled to ||H~||_F^2 = N with the noise variance
    scaled to match. Returns the detected symbols (discrete prior) or the
    estimate of s (Laplace prior; SURE-tuned).
    """
    H, y, n0 = ws.H_tilde, ws.y_tilde, ws.effective_n0
    if normalize is None:
        normalize = not ws.is_identity
    if normalize:
        c = np.sqrt(H.shape[1] / np.sum(np.abs(H) ** 2))
        H, y, n0 = c * H, c * y, c * c * n0
    if isinstance(prior, DiscretePrior):
        ep = EffectivePrior(prior)
        out = cbamp_run(y, H, make_denoiser(ep), n0, t_max=t_max, stop_tol=stop_tol, ep=ep, damping=damping)
        return map_detect(out.z, out.sigma2_hat, prior.constellation, 0.0, ep.field)
    if isinstance(prior, (LaplacePrior, BernoulliGaussPrior)):
        inst = SystemInstance(H=H, s=None, x=None, n=None, y=y, n0=n0, nt=0.0)
        return ampi_sure_run(inst, t_max=t_max, nt=0.0).s_hat
    raise TypeError(f"unsupported prior {type(prior).__name__}")


# ---------------------------------------------------------------------------
# Convex objective and nonlinear conjugate gradients


def log_prior(x, lam, nt):
    """Sum of log p(x_i) for a Laplace(lam) signal plus N(0, nt) input noise."""
    x = np.asarray(x, dtype=float)
    if nt == 0:
        return float(np.sum(np.log(lam / 2.0) - lam * np.abs(x)))
    return float(np.sum(laplace_gauss_logpdf(x, lam, nt)))


def q_objective(x, y, H, n0, lam, nt):
    """(1 / 2 n0) ||y - H x||^2 - log p(x)."""
    res = y - H @ x
    return float(res @ res / (2.0 * n0) - log_prior(x, lam, nt))


def grad_q(x, y, H, n0, lam, nt):
    """Gradient of :func:`q_objective`; at nt = 0 the prior term uses the subgradient -sign(x)."""
    if not n0 > 0:
        raise ValueError("n0 must be positive")
    x = np.asarray(x, dtype=float)
    score = -np.sign(x) if nt == 0 else laplace_gauss_eta(x, 0.0, lam, nt)
    return H.T @ (H @ x - y) / n0 - lam * score


@dataclass
class NcgResult:
    x: np.ndarray
    s_hat: np.ndarray
    objective: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def ncg_solve(y, H, n0, lam, nt, max_iter=100, grad_tol=1e-8, x0=None, map_to_signal=True,
              c1=1e-4, shrink=0.5, max_halvings=60):
    """Polak-Ribiere nonlinear CG with Armijo backtracking on :func:`q_objective`.

    The PR coefficient is clipped at zero (restart). The trial step is the
    minimizer of the quadratic data term along the search direction. The loop
    also ends once an accepted step no longer lowers the objective in floating
    point. With
    ``map_to_signal`` the result is mapped to s through E[S | x = x_hat].
    """
    n = H.shape[1]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    f = q_objective(x, y, H, n0, lam, nt)
    g = grad_q(x, y, H, n0, lam, nt)
    d = -g
    history = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= grad_tol:
            converged = True
            it -= 1
            break
        slope = float(g @ d)
        if slope >= 0:
            d = -g
            slope = float(g @ d)
        Hd = H @ d
        curv = float(Hd @ Hd) / n0
        step = -slope / curv if curv > 0 else 1.0
        for _ in range(max_halvings):
            x_new = x + step * d
            f_new = q_objective(x_new, y, H, n0, lam, nt)
            if f_new <= f + c1 * step * slope:
                break
            step *= shrink
        else:
            raise NumericalFailure("line search failed", {"iterate": x, "iteration": it, "objective": f})
        if f_new >= f:
            # step too small to change the objective: no further progress possible
            break
        g_new = grad_q(x_new, y, H, n0, lam, nt)
        beta_pr = max(0.0, float(g_new @ (g_new - g)) / float(g @ g))
        d = -g_new + beta_pr * d
        x, f, g = x_new, f_new, g_new
        history.append(f)
    else:
        converged = np.max(np.abs(g)) <= grad_tol
    s_hat = laplace_gauss_F(x, nt, lam, 0.0) if (map_to_signal and nt > 0) else x.copy()
    return NcgResult(x=x, s_hat=s_hat, objective=history, iterations=it, converged=bool(converged))


# ---------------------------------------------------------------------------
# Support oracle


def oracle_ls(y, H, support, rcond=1e-12):
    """Least squares restricted to the known support, zero elsewhere."""
    H = np.asarray(H)
    support = np.asarray(support, dtype=int)
    dtype = np.result_type(H.dtype, np.asarray(y).dtype)
    x = np.zeros(H.shape[1], dtype=dtype)
    if support.size == 0:
        return x
    if support.size > H.shape[0]:
        raise NumericalFailure("support larger than the number of measurements", {"support": support.size})
    A = H[:, support]
    sol, _, rank, sv = np.linalg.lstsq(A, y, rcond=None)
    if rank < support.size or sv[-1] <= rcond * sv[0]:
        raise NumericalFailure("support columns are rank deficient", {"rank": int(rank), "size": int(support.size)})
    x[support] = sol
    return x
