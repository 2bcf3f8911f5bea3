import math

import numpy as np
import pytest

from hsfluct import linboltz as lb

G_V1 = lambda v: v[..., 0]
G_EN = lambda v: np.sum(v * v, axis=-1) - 3.0
G_XY = lambda v: v[..., 0] * v[..., 1]

# shared small assembly for test speed (cached across tests)
ORACLE_KW = dict(d=3, degree=6, n_samples=600_000, seed=5)


def test_collision_rate_at_rest():
    # nu(0) = pi E|vbar| = pi 2 sqrt(2/pi); independent MC quadrature oracle
    exact = math.pi * 2.0 * math.sqrt(2.0 / math.pi)
    assert lb.collision_rate(np.zeros(3)) == pytest.approx(exact, rel=1e-12)
    mc = lb.collision_rate_mc(np.zeros(3), n_samples=1_000_000, seed=1)
    assert mc == pytest.approx(exact, rel=5e-3)


def test_collision_rate_isotropy():
    rng = np.random.default_rng(2)
    v = np.array([0.7, -1.1, 0.4])
    base = lb.collision_rate(v)
    for _ in range(5):
        a = rng.standard_normal((3, 3))
        q, _ = np.linalg.qr(a)
        assert lb.collision_rate(q @ v) == pytest.approx(base, rel=1e-12)


def test_collision_rate_large_speed_asymptote():
    v = np.array([20.0, 0.0, 0.0])
    assert lb.collision_rate(v) / (math.pi * 20.0) == pytest.approx(1.0,
                                                                    abs=0.02)


def test_collision_rate_matches_mc_generic():
    v = np.array([1.2, -0.5, 0.3])
    mc = lb.collision_rate_mc(v, n_samples=1_000_000, seed=3)
    assert lb.collision_rate(v) == pytest.approx(mc, rel=6e-3)


def test_collision_rate_d2():
    exact = 2.0 * math.sqrt(math.pi / 2.0)
    assert lb.collision_rate(np.zeros(2)) == pytest.approx(exact, rel=1e-10)
    mc = lb.collision_rate_mc(np.zeros(2), n_samples=400_000, seed=4)
    assert mc == pytest.approx(exact, rel=1e-2)


def test_apply_L_collision_invariants():
    v = np.array([0.7, -0.2, 1.1])
    for g in (lambda u: np.ones(u.shape[0] if u.ndim > 1 else 1),
              lambda u: u[..., 0],
              lambda u: np.sum(u * u, axis=-1)):
        assert abs(lb.apply_L(g, v, n_samples=50_000, seed=5)) < 1e-10


def test_apply_L_mc_vs_grid():
    v = np.array([1.0, 1.0, 0.0])
    a = lb.apply_L(G_XY, v, n_samples=400_000, seed=6, method="mc")
    b = lb.apply_L(G_XY, v, method="grid")
    # mc stderr ~ kernel spread / sqrt(n); combined 3 sigma band
    assert a == pytest.approx(b, abs=0.12)


def test_velocity_grid_moments():
    grid = lb.VelocityGrid.gauss_hermite(3, 8)
    assert grid.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(grid.weights > 0)
    for order, exact in ((1, 0.0), (2, 1.0), (3, 0.0), (4, 3.0)):
        mom = float(np.sum(grid.weights * grid.nodes[:, 0] ** order))
        assert mom == pytest.approx(exact, abs=1e-3)


def test_hermite_basis_orthonormal():
    basis = lb.HermiteBasis(3, 4)
    grid = lb.VelocityGrid.gauss_hermite(3, 12)
    phi = basis.evaluate(grid.nodes)
    gram = (phi * grid.weights[:, None]).T @ phi
    assert np.allclose(gram, np.eye(basis.size), atol=1e-10)


def test_galerkin_invariants_and_negativity():
    basis, mat = lb.galerkin_matrix(**ORACLE_KW)
    # conserved directions are exactly null
    for name, g in (("mass", lambda v: np.ones(v.shape[0])),
                    ("v1", G_V1),
                    ("energy", lambda v: np.sum(v * v, axis=-1) - 3.0)):
        c = basis.coefficients(g)
        assert np.allclose(mat @ c, 0.0, atol=1e-12), name
    # self-adjoint and nonpositive up to assembly noise
    assert np.allclose(mat, mat.T)
    eig = np.linalg.eigvalsh(mat)
    assert eig.max() < 1e-6
    rng = np.random.default_rng(7)
    for _ in range(20):
        c = rng.standard_normal(basis.size)
        assert float(c @ mat @ c) <= 1e-8


def test_oracle_trivials():
    # K = 0 and collision invariants reduce to plain inner products
    r = lb.duhamel_series_oracle(G_V1, G_V1, 0.0, **ORACLE_KW)
    assert r.value == pytest.approx(1.0, abs=1e-10)
    for t in (0.25, 1.0):
        r = lb.duhamel_series_oracle(G_EN, G_EN, t, **ORACLE_KW)
        assert r.value == pytest.approx(6.0, rel=1e-10)
        r = lb.duhamel_series_oracle(G_V1, G_V1, t, **ORACLE_KW)
        assert r.value == pytest.approx(1.0, rel=1e-10)


def test_oracle_truncation_error_raised():
    with pytest.raises(lb.SeriesTruncationError) as err:
        lb.duhamel_series_oracle(G_XY, G_XY, 0.5, k_terms=3, **ORACLE_KW)
    assert "k_terms" in str(err.value)


def test_oracle_dissipativity():
    # ||e^{tL} g|| non-increasing in t
    basis, mat = lb.galerkin_matrix(**ORACLE_KW)
    c = basis.coefficients(G_XY)
    prev = float(np.linalg.norm(c))
    for t in (0.1, 0.2, 0.4, 0.8):
        w, q = np.linalg.eigh(mat)
        ct = q @ (np.exp(t * w) * (q.T @ c))
        cur = float(np.linalg.norm(ct))
        assert cur <= prev + 1e-8
        prev = cur


def test_oracle_self_adjointness():
    g1 = lambda v: v[..., 0] * v[..., 1]
    g2 = lambda v: v[..., 0] ** 2 - v[..., 1] ** 2
    a = lb.duhamel_series_oracle(g1, g2, 0.3, **ORACLE_KW).value
    b = lb.duhamel_series_oracle(g2, g1, 0.3, **ORACLE_KW).value
    assert a == pytest.approx(b, abs=1e-10)


def test_fourier_mode_reductions():
    # k = 0 reduces to the velocity-only oracle
    val = lb.fourier_mode_solver(G_XY, G_XY, [0, 0, 0], 0.3, n_per_axis=16,
                                 **ORACLE_KW)
    ref = lb.duhamel_series_oracle(G_XY, G_XY, 0.3, **ORACLE_KW).value
    assert val == pytest.approx(ref, abs=2e-6)
    # t = 0 gives the inner product
    val = lb.fourier_mode_solver(G_V1, G_V1, [1, 0, 0], 0.0, n_per_axis=16,
                                 **ORACLE_KW)
    assert val == pytest.approx(1.0, abs=1e-9)


def test_fourier_free_transport_exact():
    # collisions disabled: matches int |g|^2 cos(2 pi k . v t) M dv
    k = [1, 0, 0]
    t = 0.4
    val = lb.fourier_mode_solver(G_V1, G_V1, k, t, with_collisions=False,
                                 n_per_axis=24, **ORACLE_KW)
    grid = lb.VelocityGrid.gauss_hermite(3, 24)
    ref = float(np.sum(grid.weights * grid.nodes[:, 0] ** 2
                       * np.cos(2 * math.pi * t * grid.nodes[:, 0])))
    assert val == pytest.approx(ref, abs=1e-8)


def test_inner_product_quadrature():
    assert lb.inner_product(G_V1, G_V1) == pytest.approx(1.0, abs=1e-12)
    assert lb.inner_product(G_EN, G_EN) == pytest.approx(6.0, abs=1e-10)
    assert lb.inner_product(G_V1, G_XY) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Monte Carlo semigroup


def test_semigroup_mc_t0():
    est = lb.semigroup_mc(G_XY, G_XY, 0.0, samples=400, seed=8,
                          n_particles=256)
    assert abs(est.value - 1.0) < 4 * est.stderr


def test_ensemble_invariant_t_independent():
    # e^{tL} g = g for collision invariants: value flat in t within 3 sigma
    ests = lb.ensemble_covariance(G_EN, G_EN, [0.0, 0.5], samples=500,
                                  n_particles=256, seed=9)
    z = abs(ests[0].value - ests[1].value) / math.sqrt(
        ests[0].stderr ** 2 + ests[1].stderr ** 2)
    assert z < 3.0
    # momentum is conserved exactly along every path
    ests = lb.ensemble_covariance(G_V1, G_V1, [0.0, 0.5], samples=200,
                                  n_particles=256, seed=10)
    assert ests[0].value == pytest.approx(ests[1].value, rel=1e-12)


def test_ensemble_matches_oracle():
    est = lb.ensemble_covariance(G_XY, G_XY, [0.25], samples=1200,
                                 n_particles=512, seed=11)[0]
    ref = lb.duhamel_series_oracle(G_XY, G_XY, 0.25, **ORACLE_KW)
    tol = 3 * est.stderr + est.bias_bound + 0.01
    assert abs(est.value - ref.value) < tol


def test_tree_estimator_small_time():
    # sound regime: small t and shallow cap; compare against the oracle
    est = lb.tree_covariance(G_XY, G_XY, 0.05, samples=60_000, n_max=4,
                             seed=12)
    ref = lb.duhamel_series_oracle(G_XY, G_XY, 0.05, **ORACLE_KW)
    assert abs(est.value - ref.value) < 3 * est.stderr + est.bias_bound + 0.01


def test_tree_forced_deflection_matches_jump_process():
    # forcing deflections with unit weights isolates the sign bookkeeping:
    # the root trajectory is the linear Boltzmann jump process
    g = lambda v: np.sum(v * v, axis=-1) * v[..., 0] ** 2
    est = lb.tree_covariance(lambda v: np.ones(v.shape[0]), g, 0.3,
                             samples=30_000, n_max=40, seed=13,
                             force_deflection=1, score_root_only=True)
    jm, js = lb.linear_jump_expectation(g, 0.3, samples=30_000, seed=14)
    assert abs(est.value - jm) < 3 * math.sqrt(est.stderr ** 2 + js ** 2)


def test_semigroup_estimate_json():
    est = lb.SemigroupEstimate(value=1.5, stderr=0.1, samples=10, n_max=4,
                               bias_bound=1e-3, seed=7)
    import json
    data = json.loads(est.to_json())
    assert set(data) == {"value", "stderr", "samples", "n_max", "bias_bound",
                         "seed"}
    assert data["value"] == 1.5 and data["seed"] == 7


def test_tree_size_distribution_decays_geometrically():
    # trees are created at the physical kernel intensity, so the frequency
    # of n-creation trees falls off at least geometrically for t <= 1
    rng = np.random.default_rng(15)
    n_cap = 9
    sizes = np.array([lb._tree_sample(rng, G_XY, G_XY, 0.25, n_cap, 3)[1]
                      for _ in range(20_000)])
    counts = np.array([np.sum(sizes == k) for k in range(1, n_cap)],
                      dtype=float)   # the capped class n_cap pools the tail
    assert np.all(counts > 0)
    ratios = counts[1:] / counts[:-1]
    assert np.all(ratios < 1.0), f"size frequencies not decaying: {counts}"
    fit = float(np.exp(np.polyfit(np.arange(counts.size), np.log(counts), 1)[0]))
    assert fit < 1.0
