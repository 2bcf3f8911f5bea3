import math

import numpy as np
import pytest

from hsfluct.gibbs import (Configuration, EnsembleParams, GibbsSamplingError,
                           boltzmann_grad_mu, expectation, sample_gibbs,
                           unit_ball_volume)


def test_boltzmann_grad_mu():
    assert boltzmann_grad_mu(0.1, 3) == pytest.approx(100.0)
    assert boltzmann_grad_mu(1.0, 3) == pytest.approx(1.0)
    assert boltzmann_grad_mu(0.05, 2) == pytest.approx(20.0)


def test_params_validation():
    with pytest.raises(ValueError):
        EnsembleParams(d=3, epsilon=0.3, mu=1.0, seed=0)
    with pytest.raises(ValueError):
        EnsembleParams(d=4, epsilon=0.1, mu=1.0, seed=0)


def test_poisson_limit_no_exclusion():
    # eps = 0 disables exclusion: N ~ Poisson(mu)
    mu = 30.0
    params = EnsembleParams(d=3, epsilon=0.0, mu=mu, seed=0)
    rng = np.random.default_rng(10)
    counts = np.array([sample_gibbs(params, rng).n for _ in range(10_000)])
    se = math.sqrt(mu / counts.size)
    assert abs(counts.mean() - mu) < 4 * se


def test_velocity_moments():
    params = EnsembleParams(d=3, epsilon=0.05, mu=50.0, seed=1)
    rng = np.random.default_rng(11)
    pooled = np.concatenate(
        [sample_gibbs(params, rng).v.ravel() for _ in range(200)])
    n = pooled.size
    assert abs(pooled.mean()) < 4 / math.sqrt(n)
    assert abs(pooled.var() - 1.0) < 4 * math.sqrt(2.0 / n)


def test_rejection_acceptance_rate_feasible_params():
    # acceptance vs both exp(-mu^2 c_d eps^d / 2) and a direct overlap oracle
    d, eps, mu = 3, 0.1, 10.0
    params = EnsembleParams(d=d, epsilon=eps, mu=mu, seed=2)
    rng = np.random.default_rng(12)
    attempts = 4000
    accepted = 0
    for _ in range(attempts):
        n = rng.poisson(mu)
        x = rng.random((n, d))
        cfg = Configuration(x=x, v=np.zeros((n, d)))
        if cfg.min_pair_distance() > eps:
            accepted += 1
    p_hat = accepted / attempts
    se = math.sqrt(p_hat * (1 - p_hat) / attempts)
    p_formula = math.exp(-0.5 * mu * mu * unit_ball_volume(d) * eps ** d)
    assert abs(p_hat - p_formula) < 3 * se + 0.01  # formula is O(mu eps^d) accurate


def test_prs_matches_wholesale_rejection():
    # distributional cross-check at parameters where both samplers run
    d, eps, mu = 2, 0.2, 5.0
    params = EnsembleParams(d=d, epsilon=eps, mu=mu, seed=3)
    stats = {}
    for method in ("prs", "reject"):
        rng = np.random.default_rng(13)
        counts, mind, shell = [], [], []
        for _ in range(4000):
            cfg = sample_gibbs(params, rng, method=method)
            counts.append(cfg.n)
            if cfg.n >= 2:
                dmin = cfg.min_pair_distance()
                mind.append(dmin)
                shell.append(1.0 if dmin < 1.5 * eps else 0.0)
        stats[method] = (np.array(counts, dtype=float), np.array(mind),
                         np.array(shell))

    def mean_se(a):
        return a.mean(), a.std(ddof=1) / math.sqrt(a.size)

    for k in range(3):
        m1, s1 = mean_se(stats["prs"][k])
        m2, s2 = mean_se(stats["reject"][k])
        assert abs(m1 - m2) < 4 * math.sqrt(s1 ** 2 + s2 ** 2), (
            f"statistic {k}: prs {m1} vs reject {m2}")


def test_exclusion_holds_at_scale():
    params = EnsembleParams.boltzmann_grad(0.08, 3, seed=4)
    rng = np.random.default_rng(14)
    for _ in range(10):
        cfg = sample_gibbs(params, rng)
        assert cfg.min_pair_distance() > params.epsilon
        cfg.validate_exclusion(params.epsilon)


def test_count_stochastically_dominated():
    # exclusion can only thin the Poisson process
    d, eps, mu = 3, 0.1, 30.0
    params = EnsembleParams(d=d, epsilon=eps, mu=mu, seed=5)
    rng = np.random.default_rng(15)
    counts = np.array([sample_gibbs(params, rng).n for _ in range(3000)],
                      dtype=float)
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert counts.mean() < mu + 4 * se


def test_rejection_cap_error():
    params = EnsembleParams.boltzmann_grad(0.1, 3, seed=6)  # acceptance ~ 1e-9
    rng = np.random.default_rng(16)
    with pytest.raises(GibbsSamplingError) as err:
        sample_gibbs(params, rng, method="reject", max_attempts=50)
    assert "acceptance" in str(err.value)


def test_exchangeability():
    params = EnsembleParams.boltzmann_grad(0.1, 3, seed=7)
    rng = np.random.default_rng(17)
    cfg = sample_gibbs(params, rng)
    perm = np.random.default_rng(0).permutation(cfg.n)
    stat = np.sum(cfg.v[:, 0] ** 3) + cfg.min_pair_distance()
    stat_p = np.sum(cfg.v[perm, 0] ** 3) + Configuration(
        x=cfg.x[perm], v=cfg.v[perm]).min_pair_distance()
    assert stat == pytest.approx(stat_p)


def test_expectation_trivials():
    params = EnsembleParams(d=3, epsilon=0.0, mu=40.0, seed=8, replicas=64)
    m, se = expectation(lambda c: 1.0, params)
    assert m == 1.0 and se == 0.0
    m, se = expectation(lambda c: c.n / params.mu, params, replicas=400)
    assert abs(m - 1.0) < 4 * se
    # odd symmetry of M
    m, se = expectation(
        lambda c: float(np.sum(c.v[:, 0])) / params.mu, params, replicas=400)
    assert abs(m) < 4 * max(se, 1e-12)
    with pytest.raises(ValueError):
        expectation(lambda c: 1.0, params, replicas=1)


def test_law_of_large_numbers_variance_decay():
    # Var(pi(g)) <= C / mu along a Boltzmann-Grad grid
    for eps in (0.15, 0.1):
        params = EnsembleParams.boltzmann_grad(eps, 3, seed=9)
        vals = []
        for r in range(300):
            rng = np.random.default_rng((9, r))
            cfg = sample_gibbs(params, rng)
            vals.append(float(np.sum(cfg.v[:, 0] ** 2)) / params.mu)
        var = np.var(vals, ddof=1)
        assert var < 10.0 / params.mu


def test_configuration_text_roundtrip():
    params = EnsembleParams.boltzmann_grad(0.12, 3, seed=10)
    rng = np.random.default_rng(18)
    cfg = sample_gibbs(params, rng)
    text = cfg.to_text(params.epsilon)
    header = text.splitlines()[0].split()
    assert header[0] == "3" and int(header[2]) == cfg.n
    back, eps = Configuration.from_text(text)
    assert eps == params.epsilon
    assert np.array_equal(back.x, cfg.x) and np.array_equal(back.v, cfg.v)
