"""System model y = Hx + n with input noise x = s + e, plus evaluation metrics.

All generators are pure functions of their arguments and ``seed``. A seed may be
an integer, a ``numpy.random.SeedSequence`` or a ``numpy.random.Generator``;
``stream`` derives independent per-trial generators from a master seed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def stream(seed, trial=0, tag=""):
    """Independent generator keyed by (master seed, trial index, purpose tag)."""
    key = (int(trial), zlib.crc32(tag.encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


@dataclass(frozen=True, eq=False)
class Constellation:
    """Finite symbol alphabet with prior probabilities.

    Points are kept in their canonical order; MAP ties resolve to the lowest
    index in this order.
    """

    points: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        pts = np.atleast_1d(np.asarray(self.points, dtype=complex))
        if pts.size == 0:
            raise ValueError("constellation must contain at least one point")
        if self.probs is None:
            pr = np.full(pts.size, 1.0 / pts.size)
        else:
            pr = np.atleast_1d(np.asarray(self.probs, dtype=float))
        if pr.shape != pts.shape:
            raise ValueError("points and probs must have the same length")
        if np.any(pr < 0) or abs(pr.sum() - 1.0) > 1e-12:
            raise ValueError("probs must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "probs", pr)

    def __len__(self):
        return self.points.size

    @property
    def energy(self):
        return float(np.sum(self.probs * np.abs(self.points) ** 2))

    @property
    def mean(self):
        return complex(np.sum(self.probs * self.points))

    @property
    def variance(self):
        return self.energy - abs(self.mean) ** 2

    @classmethod
    def bpsk(cls, probs=None):
        return cls(np.array([-1.0, 1.0], dtype=complex), probs)

    @classmethod
    def qam(cls, order, es=1.0):
        """Square QAM of the given order, equiprobable, average energy ``es``."""
        side = int(round(np.sqrt(order)))
        if side * side != order or side < 2:
            raise ValueError(f"QAM order must be a square >= 4, got {order}")
        levels = np.arange(-(side - 1), side, 2, dtype=float)
        re, im = np.meshgrid(levels, levels, indexing="ij")
        pts = (re + 1j * im).ravel()
        pts *= np.sqrt(es / np.mean(np.abs(pts) ** 2))
        return cls(pts, None)

    @classmethod
    def qpsk(cls, es=1.0):
        return cls.qam(4, es)

    @classmethod
    def from_name(cls, name):
        key = name.lower().replace("-", "")
        if key == "qpsk":
            return cls.qpsk()
        if key == "bpsk":
            return cls.bpsk()
        if key.endswith("qam"):
            return cls.qam(int(key[:-3]))
        raise ValueError(f"unknown constellation {name!r}")


@dataclass
class SystemInstance:
    """One realization of y = H x + n with x = s + e."""

    H: np.ndarray
    s: np.ndarray
    x: np.ndarray
    n: np.ndarray
    y: np.ndarray
    n0: float
    nt: float

    @property
    def m(self):
        return self.H.shape[0]

    @property
    def n_cols(self):
        return self.H.shape[1]

    @property
    def beta(self):
        return self.H.shape[1] / self.H.shape[0]


def _check_dims(*dims):
    for d in dims:
        if int(d) != d or d < 1:
            raise ValueError(f"dimensions must be positive integers, got {dims}")


def gen_channel(m, n, seed, field="complex"):
    """M x N matrix with i.i.d. entries of variance 1/M (CN for complex, N for real)."""
    _check_dims(m, n)
    rng = np.random.default_rng(seed)
    if field == "complex":
        return (rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))) / np.sqrt(2 * m)
    if field == "real":
        return rng.standard_normal((m, n)) / np.sqrt(m)
    raise ValueError(f"field must be 'real' or 'complex', got {field!r}")


def gen_signal(kind, n, seed):
    """Draw n i.i.d. entries from a constellation or a signal prior.

    ``kind`` is a :class:`Constellation` or one of the prior classes in
    :mod:`ampi.priors` (discrete, Laplace or Bernoulli-Gaussian).
    """
    from ampi import priors

    _check_dims(n)
    rng = np.random.default_rng(seed)
    if isinstance(kind, priors.DiscretePrior):
        kind = kind.constellation
    if isinstance(kind, Constellation):
        idx = rng.choice(len(kind), size=n, p=kind.probs)
        return kind.points[idx]
    if isinstance(kind, priors.BernoulliGaussPrior):
        mask = rng.random(n) < kind.kappa
        return np.where(mask, rng.standard_normal(n), 0.0)
    if isinstance(kind, priors.LaplacePrior):
        return rng.laplace(0.0, 1.0 / kind.lam, size=n)
    raise TypeError(f"unsupported signal kind {type(kind).__name__}")


def _gaussian(shape, var, rng, complex_valued):
    if complex_valued:
        w = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        return np.sqrt(var / 2.0) * w
    return np.sqrt(var) * rng.standard_normal(shape)


def apply_input_noise(s, nt, seed):
    """x = s + e with e i.i.d. zero-mean Gaussian of per-entry variance nt."""
    if nt < 0:
        raise ValueError("input-noise variance must be nonnegative")
    s = np.asarray(s)
    if nt == 0:
        return s.copy()
    rng = np.random.default_rng(seed)
    return s + _gaussian(s.shape, nt, rng, np.iscomplexobj(s))


def measure(H, x, n0, seed):
    """Return (y, n) with y = H x + n and n i.i.d. Gaussian of variance n0."""
    if n0 < 0:
        raise ValueError("measurement-noise variance must be nonnegative")
    H = np.asarray(H)
    x = np.asarray(x)
    if H.ndim != 2 or x.shape != (H.shape[1],):
        raise ValueError(f"shape mismatch: H{H.shape} and x{x.shape}")
    rng = np.random.default_rng(seed)
    cplx = np.iscomplexobj(H) or np.iscomplexobj(x)
    n = _gaussian(H.shape[0], n0, rng, cplx)
    return H @ x + n, n


def make_instance(m, n, prior, nt, n0, seed, trial=0, field=None):
    """Draw a complete instance, one RNG stream per purpose."""
    if field is None:
        field = "complex" if isinstance(prior, Constellation) or hasattr(prior, "constellation") else "real"
    H = gen_channel(m, n, stream(seed, trial, "channel"), field)
    s = gen_signal(prior, n, stream(seed, trial, "signal"))
    if field == "complex":
        s = s.astype(complex)
    x = apply_input_noise(s, nt, stream(seed, trial, "input-noise"))
    y, noise = measure(H, x, n0, stream(seed, trial, "noise"))
    return SystemInstance(H=H, s=s, x=x, n=noise, y=y, n0=float(n0), nt=float(nt))


def ser(s_hat, s):
    """Fraction of entries where the detected symbol differs from the truth."""
    s_hat = np.asarray(s_hat)
    s = np.asarray(s)
    if s_hat.shape != s.shape:
        raise ValueError("length mismatch")
    return float(np.mean(s_hat != s))


def rsnr_db(s_hat, s):
    """Reconstruction SNR 10 log10(||s||^2 / ||s_hat - s||^2); +inf when exact."""
    s_hat = np.asarray(s_hat)
    s = np.asarray(s)
    if s_hat.shape != s.shape:
        raise ValueError("length mismatch")
    sig = np.sum(np.abs(s) ** 2)
    if sig == 0:
        raise ValueError("reference signal is all zeros")
    err = np.sum(np.abs(s_hat - s) ** 2)
    if err == 0:
        return float("inf")
    return float(10 * np.log10(sig / err))


def snr_db(beta, es, n0):
    return float(10 * np.log10(beta * es / n0))


def evm_db(nt, es):
    return float(10 * np.log10(nt / es))


def n0_from_snr(snr, beta, es):
    """Measurement-noise variance for an average SNR of ``snr`` dB (beta*Es/N0)."""
    return beta * es / 10 ** (snr / 10)


def nt_from_evm(evm, es):
    """Input-noise variance for an error-vector magnitude of ``evm`` dB (Nt/Es)."""
    return es * 10 ** (evm / 10)
