"""Experiment definitions: config validation, per-trial work and aggregation."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ampi import model
from ampi.baselines import ncg_solve, oracle_ls, whiten, whitened_amp_run
from ampi.denoiser import laplace_gauss_FG, mixture_FG, quadrature_FG
from ampi.errors import NumericalFailure
from ampi.estimate import ampi_run, ampi_sure_run
from ampi.model import Constellation
from ampi.priors import (
    BernoulliGaussPrior,
    DiscretePrior,
    EffectivePrior,
    GaussianInputNoise,
    LaplacePrior,
    q_function,
)
from ampi.se import fixed_points, noise_thresholds, regime, se_recursion, thresholds, tuned_se_prediction

COLUMNS = [
    "experiment", "algorithm", "beta", "snr_db", "evm_db", "n", "m", "trials",
    "failures", "metric_name", "metric_mean", "metric_stderr", "seconds",
]
EXPERIMENTS = ("mimo-ser", "cs-rsnr", "se-predict", "thresholds", "denoiser-check")
MIMO_ALGORITHMS = ("ampi", "lama", "whitening-amp")
CS_ALGORITHMS = ("ampi", "amp-ignore-input-noise", "whitening-amp", "ncg", "oracle-ls", "se")
WHITENING_DAMPING = 0.3


class ConfigError(ValueError):
    """Invalid experiment configuration; ``line`` points into the source text when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def _line_of(text, key):
    if text is None:
        return None
    needle = f'"{key}"'
    for k, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return k
    return None


@dataclass
class ExperimentConfig:
    experiment: str
    n: int
    betas: list
    ms: list
    constellation: Constellation | None
    lam: float | None
    kappa: float | None
    snr_db: list
    n0: float | None
    evm_db: float | None
    nt: float | None
    algorithms: list
    trials: int
    t_max: int
    seed: int
    output: str | None
    raw: dict = field(default_factory=dict)

    @property
    def discrete(self):
        return self.constellation is not None

    @property
    def es(self):
        return self.constellation.energy if self.discrete else (self.kappa if self.kappa is not None else 2.0 / self.lam**2)

    def input_noise(self):
        if self.nt is not None:
            return self.nt
        if self.evm_db is None:
            return 0.0
        return model.nt_from_evm(self.evm_db, self.es)

    def evm_value(self):
        nt = self.input_noise()
        return model.evm_db(nt, self.es) if nt > 0 else float("-inf")

    def sweep(self):
        """(beta, m, snr_db, n0) for every sweep point, beta outermost."""
        points = []
        for beta, m in zip(self.betas, self.ms):
            if self.n0 is not None:
                points.append((beta, m, model.snr_db(beta, self.es, self.n0), self.n0))
            else:
                for snr in self.snr_db:
                    points.append((beta, m, float(snr), model.n0_from_snr(snr, beta, self.es)))
        return points


def parse_config(source, text=None):
    """Validate a config given as a dict (or JSON text) and return an :class:`ExperimentConfig`."""
    if isinstance(source, str):
        text = source
        try:
            source = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(source, dict):
        raise ConfigError("config must be a JSON object", 1)
    cfg = source

    def fail(msg, key):
        raise ConfigError(msg, _line_of(text, key))

    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        fail(f"experiment must be one of {', '.join(EXPERIMENTS)}", "experiment")
    system = cfg.get("system")
    if not isinstance(system, dict):
        fail("missing 'system' object", "system")
    noise = cfg.get("noise", {})
    if not isinstance(noise, dict):
        fail("'noise' must be an object", "noise")

    n = system.get("n", 1)
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        fail("system.n must be a positive integer", "n")
    has_m, has_beta = "m" in system, "beta" in system
    if has_m == has_beta and exp not in ("thresholds", "denoiser-check"):
        fail("give exactly one of system.m and system.beta", "m" if has_m else "system")
    if has_m and has_beta:
        fail("give exactly one of system.m and system.beta", "m")
    if has_m:
        m = system["m"]
        if not isinstance(m, int) or isinstance(m, bool) or m < 1:
            fail("system.m must be a positive integer", "m")
        ms, betas = [m], [n / m]
    elif has_beta:
        betas = system["beta"]
        if not isinstance(betas, list):
            betas = [betas]
        if not betas or not all(isinstance(b, (int, float)) and not isinstance(b, bool) and b > 0 for b in betas):
            fail("system.beta must be a nonempty list of positive numbers", "beta")
        ms = [max(1, int(round(n / b))) for b in betas]
        betas = [float(b) for b in betas]
    else:
        betas, ms = [], []

    constellation = lam = kappa = None
    if "constellation" in system:
        try:
            constellation = Constellation.from_name(str(system["constellation"]))
        except ValueError as exc:
            fail(str(exc), "constellation")
    if "lambda" in system:
        lam = system["lambda"]
        if not isinstance(lam, (int, float)) or not lam > 0:
            fail("system.lambda must be positive", "lambda")
        lam = float(lam)
    if "kappa" in system:
        kappa = system["kappa"]
        if not isinstance(kappa, (int, float)) or not 0 < kappa <= 1:
            fail("system.kappa must lie in (0, 1]", "kappa")
        kappa = float(kappa)
    if constellation is None and lam is None and kappa is None:
        fail("system needs a constellation, or lambda / kappa", "system")
    if constellation is not None and (lam is not None or kappa is not None):
        fail("a constellation cannot be combined with lambda/kappa", "constellation")

    snr, n0 = [], None
    if "snr_db" in noise and "n0" in noise:
        fail("give at most one of noise.snr_db and noise.n0", "n0")
    if "snr_db" in noise:
        snr = noise["snr_db"] if isinstance(noise["snr_db"], list) else [noise["snr_db"]]
        if not snr or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in snr):
            fail("noise.snr_db must be a nonempty list of numbers", "snr_db")
        snr = [float(v) for v in snr]
    elif "n0" in noise:
        n0 = noise["n0"]
        if not isinstance(n0, (int, float)) or not n0 > 0:
            fail("noise.n0 must be positive", "n0")
        n0 = float(n0)
    elif exp not in ("thresholds", "denoiser-check"):
        fail("noise needs snr_db or n0", "noise")
    evm, nt = None, None
    if "evm_db" in noise and "nt" in noise:
        fail("give at most one of noise.evm_db and noise.nt", "nt")
    if "evm_db" in noise:
        evm = noise["evm_db"]
        if not isinstance(evm, (int, float)) or isinstance(evm, bool):
            fail("noise.evm_db must be a number", "evm_db")
        evm = float(evm)
    if "nt" in noise:
        nt = noise["nt"]
        if not isinstance(nt, (int, float)) or nt < 0:
            fail("noise.nt must be nonnegative", "nt")
        nt = float(nt)

    algorithms = cfg.get("algorithms", [])
    allowed = MIMO_ALGORITHMS if constellation is not None else CS_ALGORITHMS
    if exp in ("mimo-ser", "cs-rsnr"):
        if exp == "mimo-ser" and constellation is None:
            fail("mimo-ser needs system.constellation", "system")
        if exp == "cs-rsnr" and kappa is None:
            fail("cs-rsnr needs system.kappa", "system")
        if not isinstance(algorithms, list) or not algorithms:
            fail("algorithms must be a nonempty list", "algorithms")
        for a in algorithms:
            if a not in allowed:
                fail(f"algorithm {a!r} is not available here (choose from {', '.join(allowed)})", "algorithms")
    elif exp == "thresholds" and constellation is None and lam is None:
        fail("thresholds needs a constellation or a Laplace lambda", "system")

    def count(key, default):
        v = cfg.get(key, default)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            fail(f"{key} must be a positive integer", key)
        return v

    trials = count("trials", 1)
    t_max = count("t_max", 100)
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        fail("seed must be a nonnegative integer", "seed")
    output = cfg.get("output")
    if output is not None and not isinstance(output, str):
        fail("output must be a path string", "output")
    return ExperimentConfig(
        experiment=exp, n=n, betas=betas, ms=ms, constellation=constellation, lam=lam, kappa=kappa,
        snr_db=snr, n0=n0, evm_db=evm, nt=nt, algorithms=list(algorithms), trials=trials, t_max=t_max,
        seed=seed, output=output, raw=cfg,
    )


# ---------------------------------------------------------------------------
# Per-trial work (top-level so that worker processes can pickle it)


def _mimo_trial(cfg, point, trial):
    beta, m, _, n0 = point
    nt = cfg.input_noise()
    prior = DiscretePrior(cfg.constellation)
    inst = model.make_instance(m, cfg.n, prior, nt, n0, cfg.seed, trial)
    out = {}
    for alg in cfg.algorithms:
        try:
            if alg == "ampi":
                s_hat = ampi_run(inst, EffectivePrior(prior, GaussianInputNoise(nt)), t_max=cfg.t_max).s_hat
            elif alg == "lama":
                s_hat = ampi_run(inst, EffectivePrior(prior), t_max=cfg.t_max).s_hat
            else:
                ws = whiten(inst.H, inst.y, nt, n0)
                s_hat = whitened_amp_run(ws, prior, t_max=cfg.t_max, damping=WHITENING_DAMPING)
            out[alg] = model.ser(s_hat, inst.s)
        except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError):
            out[alg] = None
    return out


def _cs_trial(cfg, point, trial):
    beta, m, _, n0 = point
    nt = cfg.input_noise()
    prior = BernoulliGaussPrior(cfg.kappa)
    inst = model.make_instance(m, cfg.n, prior, nt, n0, cfg.seed, trial, field="real")
    out = {}
    ampi_res = None

    def run_ampi():
        nonlocal ampi_res
        if ampi_res is None:
            ampi_res = ampi_sure_run(inst, t_max=cfg.t_max)
        return ampi_res

    for alg in cfg.algorithms:
        if alg == "se":
            continue
        try:
            if not np.any(inst.s):
                raise NumericalFailure("all-zero signal draw", {})
            if alg == "ampi":
                s_hat = run_ampi().s_hat
            elif alg == "amp-ignore-input-noise":
                s_hat = ampi_sure_run(inst, t_max=cfg.t_max, nt=0.0).s_hat
            elif alg == "whitening-amp":
                s_hat = whitened_amp_run(whiten(inst.H, inst.y, nt, n0), prior, t_max=cfg.t_max)
            elif alg == "ncg":
                lam = run_ampi().tuned_params[-1][0]
                s_hat = ncg_solve(inst.y, inst.H, n0, lam, nt, max_iter=cfg.t_max).s_hat
            else:
                s_hat = oracle_ls(inst.y, inst.H, np.flatnonzero(inst.s))
            out[alg] = model.rsnr_db(s_hat, inst.s)
        except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError):
            out[alg] = None
    return out


def _run_trial(args):
    cfg, point, trial = args
    if cfg.discrete:
        return _mimo_trial(cfg, point, trial)
    return _cs_trial(cfg, point, trial)


# ---------------------------------------------------------------------------
# Deterministic predictions


def qam_ser(c, noise_var):
    """Symbol-error rate of nearest-neighbour detection of square QAM (or BPSK) in CN(0, noise_var)."""
    pts = c.points
    if len(c) == 2 and np.allclose(pts.imag, 0):
        d = np.abs(pts.real).max()
        return float(q_function(d / np.sqrt(noise_var / 2.0)))
    side = int(round(np.sqrt(len(c))))
    if side * side != len(c):
        raise ValueError("closed-form error rate needs a square QAM or BPSK constellation")
    d = np.min(np.abs(pts[0] - pts[1:])) / 2.0
    p_dim = 2.0 * (1.0 - 1.0 / side) * q_function(d / np.sqrt(noise_var / 2.0))
    return float(1.0 - (1.0 - p_dim) ** 2)


def se_prediction(cfg, point):
    """SE-predicted metric for one sweep point: SER (constellations) or RSNR in dB."""
    beta, _, _, n0 = point
    nt = cfg.input_noise()
    if cfg.discrete:
        ep = EffectivePrior(DiscretePrior(cfg.constellation), GaussianInputNoise(nt))
        sig = se_recursion(beta, n0, ep, t_max=max(cfg.t_max, 2)).sigma2[-1]
        return "ser", qam_ser(cfg.constellation, nt + sig)
    return "rsnr_db", tuned_se_prediction(beta, n0, cfg.kappa, nt).rsnr_db


# ---------------------------------------------------------------------------
# Aggregation


def _sig(x):
    """Round to 9 significant digits (what the emitters print)."""
    if isinstance(x, float) and math.isfinite(x):
        return float(format(x, ".9g"))
    return x


def make_row(cfg, algorithm, point, trials, failures, name, mean, stderr, seconds):
    beta, m, snr, _ = point
    row = dict(zip(COLUMNS, [
        cfg.experiment, algorithm, float(beta), float(snr), cfg.evm_value(), cfg.n, int(m), int(trials),
        int(failures), name, float(mean), float(stderr), float(seconds),
    ]))
    return {k: _sig(v) for k, v in row.items()}


def _aggregate(values, linear_db=False):
    ok = [v for v in values if v is not None]
    if not ok:
        return float("nan"), float("nan")
    arr = np.array(ok, dtype=float)
    if linear_db:
        lin = 10 ** (-arr / 10)
        mean = -10 * np.log10(np.mean(lin))
        return float(mean), 0.0
    mean = float(np.mean(arr))
    if arr.size < 2 or not np.all(np.isfinite(arr)):
        return mean, 0.0
    return mean, float(np.std(arr, ddof=1) / np.sqrt(arr.size))


def run_experiment(cfg, threads=1, timing=False, on_row=None, linear_rsnr=False):
    """Run every sweep point; returns the list of result rows.

    Trials of one sweep point run on a process pool when ``threads`` > 1 and
    are collected in trial order, so the table does not depend on scheduling.
    ``on_row`` is called with each row as soon as it is final.
    """
    rows = []

    def emit(row):
        rows.append(row)
        if on_row is not None:
            on_row(row)

    if cfg.experiment == "thresholds":
        for row in _threshold_rows(cfg):
            emit(row)
        return rows
    if cfg.experiment == "denoiser-check":
        for row in _denoiser_rows(cfg, timing):
            emit(row)
        return rows

    pool = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for point in cfg.sweep():
            algs = list(cfg.algorithms) if cfg.experiment != "se-predict" else ["se"]
            mc = [a for a in algs if a != "se"]
            if mc:
                start = time.perf_counter()
                tasks = [(cfg, point, t) for t in range(cfg.trials)]
                results = list(pool.map(_run_trial, tasks)) if pool else [_run_trial(t) for t in tasks]
                seconds = (time.perf_counter() - start) / len(mc) if timing else 0.0
                for alg in mc:
                    vals = [r[alg] for r in results]
                    linear = linear_rsnr and not cfg.discrete
                    mean, se = _aggregate(vals, linear)
                    name = "ser" if cfg.discrete else ("rsnr_db_linear_avg" if linear else "rsnr_db")
                    emit(make_row(cfg, alg, point, cfg.trials, sum(v is None for v in vals), name, mean, se, seconds))
            if "se" in algs:
                start = time.perf_counter()
                name, value = se_prediction(cfg, point)
                seconds = time.perf_counter() - start if timing else 0.0
                emit(make_row(cfg, "se", point, 1, 0, name, value, 0.0, seconds))
    finally:
        if pool is not None:
            pool.shutdown()
    return rows


def _threshold_rows(cfg):
    nt = cfg.input_noise()
    if cfg.discrete:
        ep = EffectivePrior(DiscretePrior(cfg.constellation), GaussianInputNoise(nt))
    else:
        ep = EffectivePrior(LaplacePrior(cfg.lam), GaussianInputNoise(nt))
    base = thresholds(ep)
    rows = []
    nopoint = (float("nan"), 0, float("nan"), None)
    rows.append(make_row(cfg, "se", nopoint, 1, 0, "beta_min", base.beta_min, 0.0, 0.0))
    rows.append(make_row(cfg, "se", nopoint, 1, 0, "beta_max", base.beta_max, 0.0, 0.0))
    for point in cfg.sweep() if cfg.betas else []:
        beta, _, _, n0 = point
        rep = noise_thresholds(base, beta, ep)
        for name in ("n0_min", "n0_max"):
            val = getattr(rep, name)
            if val is not None:
                rows.append(make_row(cfg, "se", point, 1, 0, name, val, 0.0, 0.0))
        label = regime(beta, n0, rep)
        rows.append(make_row(cfg, "se", point, 1, 0, f"regime={label}", 1.0, 0.0, 0.0))
        rows.append(make_row(cfg, "se", point, 1, 0, "fixed_points", len(fixed_points(beta, n0, ep)), 0.0, 0.0))
    return rows


def _denoiser_rows(cfg, timing):
    """Largest deviation between closed-form denoisers and the quadrature oracle."""
    rng = model.stream(cfg.seed, 0, "denoiser-check")
    start = time.perf_counter()
    worst_f = worst_g = 0.0
    nt = cfg.input_noise()
    for _ in range(cfg.trials):
        tau = float(np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        if cfg.discrete:
            ep = EffectivePrior(DiscretePrior(cfg.constellation), GaussianInputNoise(nt))
            z = complex(rng.normal(scale=1.5), rng.normal(scale=1.5))
            means, variances, weights = ep.mixture()
            f, g = mixture_FG(z, tau, means, variances, weights, ep.field)
        else:
            ep = EffectivePrior(LaplacePrior(cfg.lam), GaussianInputNoise(nt))
            z = float(rng.normal(scale=3.0 / cfg.lam))
            f, g = laplace_gauss_FG(z, tau, cfg.lam, nt)
        qf, qg = quadrature_FG(ep, z, tau)
        worst_f = max(worst_f, float(np.abs(f - qf[0])))
        worst_g = max(worst_g, float(np.abs(g - qg[0])))
    seconds = time.perf_counter() - start if timing else 0.0
    point = (float("nan"), 0, float("nan"), None)
    return [
        make_row(cfg, "closed-form", point, cfg.trials, 0, "max_abs_error_F", worst_f, 0.0, seconds),
        make_row(cfg, "closed-form", point, cfg.trials, 0, "max_abs_error_G", worst_g, 0.0, seconds),
    ]
