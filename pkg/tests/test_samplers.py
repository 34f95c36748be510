import numpy as np
import pytest

from quam import models as M
from quam import samplers as S
from quam.data import LabeledDataset, gen_two_moons
from quam.measures import decompose_a
from quam.rng import derive_rng


@pytest.fixture(scope="module")
def moons():
    return gen_two_moons(120, noise=0.1, seed=0)


def test_deep_ensemble_singleton_zero_epistemic(moons):
    out = S.deep_ensemble(moons, M.ArchSpec((2, 8, 2)), 1, M.TrainConfig(epochs=60, seed=0))
    assert len(out.params) == 1
    br = decompose_a(out.predictive_samples(np.array([0.0, 1.0])))
    assert br.epistemic == pytest.approx(0.0, abs=1e-12)


def test_deep_ensemble_members_fit_and_differ(moons):
    out = S.deep_ensemble(moons, M.ArchSpec((2, 16, 2)), 10, M.TrainConfig(epochs=600, seed=5))
    for p in out.params:
        acc = (M.predict_batch(p, moons.x).argmax(1) == moons.y).mean()
        assert acc >= 0.95
    for i in range(10):
        for j in range(i + 1, 10):
            assert not np.array_equal(out.params[i].values, out.params[j].values)


def test_mc_dropout_requires_dropout():
    arch = M.ArchSpec((2, 8, 2))
    params = M.init_params(arch, 0)
    with pytest.raises(ValueError):
        S.mc_dropout(params, np.array([0.0, 0.0]), 10)


def test_mc_dropout_vanishing_rate_matches_deterministic(moons):
    arch = M.ArchSpec((2, 10, 2), dropout_prob=1e-9)
    params = M.train(moons, arch, M.TrainConfig(epochs=100, seed=1))
    x = np.array([0.4, 0.3])
    out = S.mc_dropout(params, x, 20, seed=3)
    base = M.predict(params, x).probs
    for d, _ in out.predictive_samples():
        assert np.abs(d.probs - base).max() < 1e-6


def test_mc_dropout_seeded(moons):
    arch = M.ArchSpec((2, 10, 2), dropout_prob=0.2)
    params = M.train(moons, arch, M.TrainConfig(epochs=100, seed=1))
    x = np.array([0.4, 0.3])
    a = S.mc_dropout(params, x, 25, seed=9)
    b = S.mc_dropout(params, x, 25, seed=9)
    for (d1, _), (d2, _) in zip(a.predictive_samples(), b.predictive_samples()):
        assert np.array_equal(d1.probs, d2.probs)


def test_mc_dropout_far_point_more_epistemic(moons):
    # far point beyond the lower moon's end vs the median training point
    arch = M.ArchSpec((2, 16, 2), dropout_prob=0.2)
    params = M.train(moons, arch, M.TrainConfig(epochs=200, seed=2))
    far = decompose_a(S.mc_dropout(params, np.array([3.0, 0.5]), 300, seed=0).predictive_samples())
    train_vals = [
        decompose_a(S.mc_dropout(params, moons.x[i], 300, seed=0).predictive_samples()).epistemic
        for i in range(0, len(moons), 10)
    ]
    assert far.epistemic > np.median(train_vals)


# -- cyclical SG-HMC -----------------------------------------------------------


def test_cosine_schedule_endpoints():
    assert S.cosine_step_size(0.1, 0, 100) == pytest.approx(0.1, abs=1e-15)
    assert S.cosine_step_size(0.1, 99, 100) <= 1e-3 * 0.1


def test_csghmc_zero_step_size_stays_at_init(moons):
    arch = M.ArchSpec((2, 6, 2))
    init = M.init_params(arch, 3)
    out = S.csghmc(moons, arch, cycles=1, steps_per_cycle=20, step_size=0.0, seed=0, init=init)
    for p in out.params:
        assert np.array_equal(p.values, init.values)


def test_csghmc_conjugate_gaussian_posterior_mean():
    # constant-input model: y ~ N(bias, 1) with prior precision lam on the
    # bias gives an analytic posterior N(sum(y)/(n+lam), 1/(n+lam))
    rng = derive_rng(4)
    n = 40
    y = rng.normal(1.5, 1.0, size=n)
    data = LabeledDataset(np.zeros((n, 1)), y, "regression")
    arch = M.ArchSpec((1, 1), head="gaussian_scalar")
    lam = 1.0
    post_mean = y.sum() / (n + lam)
    post_var = 1.0 / (n + lam)
    out = S.csghmc(data, arch, cycles=6, steps_per_cycle=400, step_size=2e-4, seed=1, friction=0.1, prior_precision=lam, tail_fraction=0.5)
    bias_draws = np.array([p.values[1] for p in out.params])
    stderr = np.sqrt(post_var) / np.sqrt(len(bias_draws) / 10.0)  # conservative autocorrelation discount
    assert abs(bias_draws.mean() - post_mean) < 3 * max(stderr, np.sqrt(post_var) / 3)


def test_csghmc_diagnostics_present(moons):
    out = S.csghmc(moons, M.ArchSpec((2, 4, 2)), cycles=2, steps_per_cycle=30, step_size=1e-4, seed=0)
    assert out.diagnostics["cycles"] == 2
    assert len(out.diagnostics["step_sizes"]) == 60
    assert out.diagnostics["step_sizes"][0] == pytest.approx(1e-4)


# -- HMC -----------------------------------------------------------------------


def correlated_gaussian():
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    prec = np.linalg.inv(cov)

    def logp(q):
        return -0.5 * q @ prec @ q

    def grad(q):
        return -prec @ q

    return cov, logp, grad


def test_hmc_recovers_covariance():
    cov, logp, grad = correlated_gaussian()
    out = S.hmc(logp, grad, np.zeros(2), n_samples=8000, n_leapfrog=20, step_size=0.2, seed=1, burn_in=1000, auto_tune=True)
    emp = np.cov(out.draws.T)
    assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.1
    assert 0.5 <= out.diagnostics["acceptance_rate"] <= 0.99


def test_hmc_acceptance_rate_high_after_tuning():
    cov, logp, grad = correlated_gaussian()
    out = S.hmc(logp, grad, np.zeros(2), n_samples=2000, n_leapfrog=20, step_size=0.05, seed=2, burn_in=1000, auto_tune=True)
    assert out.diagnostics["sampling_acceptance_rate"] >= 0.9


def test_leapfrog_energy_error_scales_quadratically():
    cov, logp, grad = correlated_gaussian()

    def mean_abs_dh(eps, n_steps, seed=0):
        rng = derive_rng(seed)
        errs = []
        for _ in range(300):
            q = rng.multivariate_normal(np.zeros(2), cov)
            p = rng.standard_normal(2)
            h0 = -logp(q) + 0.5 * p @ p
            q1, p1 = S.leapfrog(q, p, grad, eps, n_steps)
            errs.append(abs(-logp(q1) + 0.5 * p1 @ p1 - h0))
        return np.mean(errs)

    ratio = mean_abs_dh(0.2, 16) / mean_abs_dh(0.1, 32)  # same trajectory time
    assert 3.5 <= ratio <= 4.5


def test_hmc_zero_leapfrog_never_moves():
    _, logp, grad = correlated_gaussian()
    out = S.hmc(logp, grad, np.array([2.0, -1.0]), n_samples=50, n_leapfrog=0, step_size=0.1, seed=3)
    assert np.allclose(out.draws, out.draws[0])


def test_hmc_aborts_on_hundred_rejections():
    # a pathological step size on a narrow target rejects everything
    def logp(q):
        return -0.5 * 1e8 * q @ q

    def grad(q):
        return -1e8 * q

    with pytest.raises(S.HMCAborted):
        S.hmc(logp, grad, np.array([1.0]), n_samples=300, n_leapfrog=30, step_size=1.0, seed=4)


def test_hmc_seed_deterministic():
    _, logp, grad = correlated_gaussian()
    a = S.hmc(logp, grad, np.zeros(2), n_samples=200, n_leapfrog=10, step_size=0.3, seed=7)
    b = S.hmc(logp, grad, np.zeros(2), n_samples=200, n_leapfrog=10, step_size=0.3, seed=7)
    assert np.array_equal(a.draws, b.draws)


def test_hmc_posterior_wraps_models(moons):
    arch = M.ArchSpec((2, 4, 2))
    out = S.hmc_posterior(moons, arch, prior_precision=1e-2, n_samples=30, n_leapfrog=10, step_size=1e-3, seed=0, burn_in=50)
    assert len(out.params) == 30
    assert all(p.arch == arch for p in out.params)
    assert "acceptance_rate" in out.diagnostics
