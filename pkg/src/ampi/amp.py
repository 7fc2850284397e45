"""Complex/real AMP engine producing the decoupled output z = x + noise.

The engine is generic over the scalar field and the denoiser. Matrix products
are plain ``H @ v`` calls; with a fixed BLAS build and thread count these are
deterministic, so reruns reproduce trajectories bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ampi.errors import AmpDivergence

DIVERGENCE_FACTOR = 1e6


@dataclass
class AmpState:
    """Per-trial iterate.

    ``gamma2`` is the threshold that the next step will denoise with; ``z``
    and ``z_gamma2`` are the most recent decoupled output and the threshold it
    was denoised with (both None before the first step).
    """

    x_hat: np.ndarray
    r: np.ndarray
    gamma2: float
    t: int = 1
    z: np.ndarray | None = None
    z_gamma2: float | None = None
    gamma2_init: float = 0.0
    trace: list = field(default_factory=list)


@dataclass
class DecoupledOutput:
    z: np.ndarray
    sigma2_hat: float
    trace: list
    x_hat: np.ndarray
    r: np.ndarray
    iterations: int
    converged: bool


def cbamp_init(y, ep, n0, beta):
    """x_hat = E[X], r = y, gamma2 = n0 + beta Var[X].

    ``ep`` is anything exposing ``mean``, ``var`` and the signal length is
    taken from ``round(beta * len(y))``.
    """
    y = np.asarray(y)
    n = int(round(beta * y.shape[0]))
    if n < 1:
        raise ValueError("beta * M must be at least 1")
    var = float(ep.var)
    if n0 < 0 or not n0 + beta * var > 0:
        raise ValueError("n0 + beta * Var[X] must be positive")
    dtype = np.result_type(y.dtype, np.asarray(ep.mean).dtype, float)
    x_hat = np.full(n, ep.mean, dtype=dtype)
    gamma2 = float(n0 + beta * var)
    return AmpState(x_hat=x_hat, r=y, gamma2=gamma2, gamma2_init=gamma2)


def cbamp_step(state, y, H, d, n0, beta, damping=0.0, HH=None):
    """One iteration: denoise z = x_hat + H^H r at the current threshold.

    Returns a new state; the input state is not modified. ``HH`` may pass a
    precomputed conjugate transpose of ``H``.
    """
    if HH is None:
        HH = H.conj().T
    gamma2 = state.gamma2
    z = state.x_hat + HH @ state.r
    f, g = d.FG(z, gamma2)
    mean_g = float(np.mean(g))
    gamma2_new = n0 + beta * mean_g
    x_new = f
    if damping:
        x_new = (1.0 - damping) * f + damping * state.x_hat
        gamma2_new = (1.0 - damping) * gamma2_new + damping * gamma2
    r_new = y - H @ x_new + beta * (state.r / gamma2) * mean_g
    record = {
        "t": state.t,
        "gamma2": gamma2,
        "mean_G": mean_g,
        "residual_energy": float(np.vdot(r_new, r_new).real),
    }
    trace = state.trace + [record]
    if not (
        np.isfinite(gamma2_new)
        and np.all(np.isfinite(x_new))
        and np.all(np.isfinite(r_new))
        and gamma2_new <= DIVERGENCE_FACTOR * state.gamma2_init
    ):
        raise AmpDivergence(f"AMP diverged at iteration {state.t}", trace)
    return AmpState(
        x_hat=x_new, r=r_new, gamma2=float(gamma2_new), t=state.t + 1, z=z,
        z_gamma2=gamma2, gamma2_init=state.gamma2_init, trace=trace,
    )


def cbamp_run(y, H, d, n0, beta=None, t_max=100, stop_tol=1e-6, ep=None, damping=0.0, state=None):
    """Iterate until ``t_max`` steps or a relative threshold change <= ``stop_tol``.

    The prior used for initialization is ``ep`` if given, else the denoiser
    (which exposes the moments of its assumed prior). The returned ``z`` is the
    last decoupled output and ``sigma2_hat`` the threshold it was denoised
    with, the engine's estimate of the effective noise variance of z.
    """
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    y = np.asarray(y)
    H = np.asarray(H)
    if beta is None:
        beta = H.shape[1] / H.shape[0]
    if state is None:
        state = cbamp_init(y, ep if ep is not None else d, n0, beta)
    HH = H.conj().T
    converged = False
    for _ in range(t_max):
        prev = state.gamma2
        state = cbamp_step(state, y, H, d, n0, beta, damping, HH)
        if abs(state.gamma2 - prev) <= stop_tol * prev:
            converged = True
            break
    return DecoupledOutput(
        z=state.z, sigma2_hat=state.z_gamma2, trace=state.trace, x_hat=state.x_hat,
        r=state.r, iterations=state.t - 1, converged=converged,
    )


def estimate_sigma2_residual(r):
    """Effective-noise estimate ||r||^2 / M from the residual."""
    r = np.asarray(r)
    if r.size < 1:
        raise ValueError("residual must be nonempty")
    return float(np.vdot(r, r).real / r.size)
