import numpy as np
import pytest

from ampi.baselines import (
    grad_q,
    log_prior,
    ncg_solve,
    oracle_ls,
    q_objective,
    whiten,
    whitened_amp_run,
)
from ampi.denoiser import laplace_gauss_F
from ampi.errors import NumericalFailure
from ampi.estimate import ampi_run
from ampi.model import Constellation, gen_channel, make_instance, rsnr_db
from ampi.priors import BernoulliGaussPrior, DiscretePrior, EffectivePrior

QPSK = Constellation.qpsk()


def cs_instance(beta=2.0, n=1000, seed=1, trial=0):
    kappa, nt = 0.05, 5e-5
    m = int(round(n / beta))
    n0 = beta * kappa / 1000
    return make_instance(m, n, BernoulliGaussPrior(kappa), nt, n0, seed, trial)


class TestWhiten:
    def test_no_input_noise_is_identity(self):
        H = gen_channel(8, 12, 0)
        y = np.arange(8) + 1j
        ws = whiten(H, y, 0.0, 0.1)
        assert ws.is_identity and ws.H_tilde is H and ws.y_tilde is y and ws.effective_n0 == 0.1

    @pytest.mark.parametrize("field", ["complex", "real"])
    def test_algebraic_identity(self, field):
        H = gen_channel(40, 60, 3, field)
        nt, n0 = 0.1, 0.02
        ws = whiten(H, np.zeros(40), nt, n0)
        Q = nt * H @ H.conj().T + n0 * np.eye(40)
        lhs = ws.W @ Q @ ws.W.conj().T
        assert np.linalg.norm(lhs - n0 * np.eye(40)) <= 1e-10 * np.linalg.norm(n0 * np.eye(40))
        np.testing.assert_allclose(ws.H_tilde, ws.W @ H, atol=1e-14)

    def test_whitened_noise_covariance(self):
        m, n, nt, n0, draws = 64, 64, 0.1, 0.01, 500
        H = gen_channel(m, n, 5)
        W = whiten(H, np.zeros(m), nt, n0).W
        rng = np.random.default_rng(6)

        def cn(shape, var):
            return np.sqrt(var / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))

        raw = H @ cn((n, draws), nt) + cn((m, draws), n0)
        cov_white = (W @ raw) @ (W @ raw).conj().T / draws
        cov_raw = raw @ raw.conj().T / draws
        off = ~np.eye(m, dtype=bool)
        assert abs(np.mean(np.diag(cov_white).real) / n0 - 1) < 0.10
        assert np.all(np.abs(np.diag(cov_white).real / n0 - 1) < 0.5)
        # white noise leaves only sampling fluctuations off the diagonal: E|C_ij|^2 = n0^2 / draws
        floor = m * (m - 1) * n0**2 / draws
        assert np.sum(np.abs(cov_white[off]) ** 2) < 1.2 * floor
        # the unwhitened noise is visibly correlated by the same yardstick
        raw_floor = m * (m - 1) * np.mean(np.diag(cov_raw).real) ** 2 / draws
        assert np.sum(np.abs(cov_raw[off]) ** 2) > 3 * raw_floor

    def test_requires_positive_noise(self):
        with pytest.raises(ValueError):
            whiten(np.eye(2), np.zeros(2), 0.1, 0.0)


class TestWhitenedAmp:
    def test_no_input_noise_matches_plain_amp(self):
        inst = make_instance(48, 48, QPSK, 0.0, 0.05, seed=2)
        ws = whiten(inst.H, inst.y, 0.0, inst.n0)
        ep = EffectivePrior(DiscretePrior(QPSK))
        out = whitened_amp_run(ws, DiscretePrior(QPSK), t_max=40)
        assert np.array_equal(out, ampi_run(inst, ep, t_max=40).s_hat)

    def test_symbols_out(self):
        inst = make_instance(48, 48, QPSK, 0.1, 0.05, seed=2)
        out = whitened_amp_run(whiten(inst.H, inst.y, 0.1, inst.n0), DiscretePrior(QPSK), t_max=30, damping=0.3)
        assert np.all(np.isin(out, QPSK.points))

    def test_rejects_unknown_prior(self):
        ws = whiten(np.eye(2), np.zeros(2), 0.0, 1.0)
        with pytest.raises(TypeError):
            whitened_amp_run(ws, object())


class TestGradient:
    def test_zero_point(self):
        H = gen_channel(20, 30, 1, "real")
        y = np.random.default_rng(0).standard_normal(20)
        np.testing.assert_allclose(grad_q(np.zeros(30), y, H, 0.1, 2.0, 0.05), -H.T @ y / 0.1, atol=1e-13)

    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        m, n, n0, lam, nt = 30, 60, 0.01, 3.0, 0.01
        H = gen_channel(m, n, 8, "real")
        y = rng.standard_normal(m) * 0.3
        worst = 0.0
        for _ in range(100):
            x = rng.standard_normal(n) * 0.5
            g = grad_q(x, y, H, n0, lam, nt)
            fd = np.empty(n)
            for i in range(n):
                h = 1e-5 * max(1.0, abs(x[i]))
                e = np.zeros(n)
                e[i] = h
                fd[i] = (q_objective(x + e, y, H, n0, lam, nt) - q_objective(x - e, y, H, n0, lam, nt)) / (2 * h)
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(g))
        assert worst < 1e-5

    def test_laplace_tail_slope(self):
        lam, nt = 2.5, 0.01
        x = np.array([1e3])
        g = grad_q(x, np.zeros(1), np.zeros((1, 1)), 1.0, lam, nt)[0]
        h = 1e-3
        numeric = -(log_prior(x + h, lam, nt) - log_prior(x - h, lam, nt)) / (2 * h)
        assert abs(g - lam) < 1e-6 and abs(g - numeric) < 1e-6

    def test_requires_positive_noise(self):
        with pytest.raises(ValueError):
            grad_q(np.zeros(2), np.zeros(2), np.eye(2), 0.0, 1.0, 0.1)


@pytest.fixture(scope="module")
def runs():
    inst = cs_instance(beta=2.0)
    lam = 150.0
    short = ncg_solve(inst.y, inst.H, inst.n0, lam, inst.nt, max_iter=100)
    long = ncg_solve(inst.y, inst.H, inst.n0, lam, inst.nt, max_iter=1000)
    return inst, lam, short, long


class TestNcg:
    def test_objective_nonincreasing(self, runs):
        _, _, short, long = runs
        for res in (short, long):
            assert np.all(np.diff(res.objective) <= 0)

    def test_close_to_long_run(self, runs):
        _, _, short, long = runs
        assert abs(short.objective[-1] - long.objective[-1]) <= 1e-6 * abs(long.objective[-1])

    def test_signal_map(self, runs):
        inst, lam, short, _ = runs
        np.testing.assert_array_equal(short.s_hat, laplace_gauss_F(short.x, inst.nt, lam, 0.0))
        raw = ncg_solve(inst.y, inst.H, inst.n0, lam, inst.nt, max_iter=100, map_to_signal=False)
        np.testing.assert_array_equal(raw.s_hat, raw.x)
        assert rsnr_db(short.s_hat, inst.s) > 15

    def test_line_search_failure(self):
        H = np.eye(3)
        with pytest.raises(NumericalFailure) as err:
            ncg_solve(np.ones(3), H, 0.1, 1.0, 0.01, max_halvings=0)
        assert "iterate" in err.value.diagnostics


class TestOracleLs:
    def test_noiseless_exact(self):
        inst = make_instance(100, 300, BernoulliGaussPrior(0.1), 0.0, 0.0, seed=4)
        x = oracle_ls(inst.y, inst.H, np.flatnonzero(inst.s))
        np.testing.assert_allclose(x, inst.s, atol=1e-10)

    def test_normal_equations(self):
        inst = cs_instance(beta=4.0)
        support = np.flatnonzero(inst.s)
        x = oracle_ls(inst.y, inst.H, support)
        res = inst.y - inst.H @ x
        assert np.max(np.abs(inst.H[:, support].T @ res)) < 1e-8
        assert np.all(x[np.setdiff1d(np.arange(inst.H.shape[1]), support)] == 0)

    def test_empty_support(self):
        assert np.all(oracle_ls(np.ones(4), np.eye(4), []) == 0)

    def test_degenerate_supports(self):
        H = np.ones((4, 3))
        with pytest.raises(NumericalFailure):
            oracle_ls(np.ones(4), H, [0, 1])
        with pytest.raises(NumericalFailure):
            oracle_ls(np.ones(2), np.eye(2, 3), [0, 1, 2])
