import numpy as np
import pytest

from tesda._special import chi2_cdf
from tesda.errors import NumericalError, ValidationError
from tesda.robust import (
    calibrate_delta_empirical,
    consistency_factor,
    envelope_from_params,
    fit_mcd,
    is_outlier,
    mahalanobis_sq,
    mahalanobis_sq_many,
)
from tesda.synth import ks_statistic


def test_mahalanobis_at_center():
    env = envelope_from_params(np.array([1.0, -2.0]), np.eye(2))
    assert mahalanobis_sq(env, [1.0, -2.0]).d_sq == 0.0


def test_mahalanobis_euclidean_case():
    env = envelope_from_params(np.zeros(2), np.eye(2))
    assert mahalanobis_sq(env, [3.0, 4.0]).d_sq == pytest.approx(25.0, rel=1e-12)


def test_mahalanobis_matches_explicit_inverse():
    rng = np.random.default_rng(14)
    a = rng.normal(size=(4, 4))
    sigma = a @ a.T + 0.5 * np.eye(4)
    mu = rng.normal(size=4)
    env = envelope_from_params(mu, sigma)
    inv = np.linalg.inv(sigma)
    for _ in range(20):
        theta = rng.normal(size=4) * 3.0
        oracle = float((theta - mu) @ inv @ (theta - mu))
        assert mahalanobis_sq(env, theta).d_sq == pytest.approx(oracle, rel=1e-8)


def test_envelope_invariants():
    rng = np.random.default_rng(15)
    a = rng.normal(size=(3, 3))
    env = envelope_from_params(np.zeros(3), a @ a.T + np.eye(3))
    assert np.abs(env.sigma_inv @ env.sigma_hat - np.eye(3)).max() < 1e-6
    assert np.abs(env.sigma_hat - env.sigma_hat.T).max() < 1e-10
    assert np.all(np.linalg.eigvalsh(env.sigma_hat) > 0)


def test_envelope_rejects_asymmetric():
    with pytest.raises(ValidationError, match="symmetric"):
        envelope_from_params(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_envelope_rejects_degenerate():
    with pytest.raises(NumericalError):
        envelope_from_params(np.zeros(2), np.array([[1.0, 0.0], [0.0, 1e-30]]))


def test_is_outlier_strict_inequality():
    env = envelope_from_params(np.zeros(2), np.eye(2), delta_sq=9.0)
    assert not is_outlier(env, [0.0, 0.0])
    assert is_outlier(env, [3.0, 0.1])        # d^2 = 9.01
    assert not is_outlier(env, [3.0, 0.0])    # boundary d^2 == delta_sq


def test_is_outlier_requires_threshold():
    env = envelope_from_params(np.zeros(2), np.eye(2))
    with pytest.raises(ValidationError, match="threshold"):
        is_outlier(env, [0.0, 0.0])


def test_mcd_clean_gaussian():
    rng = np.random.default_rng(100)
    x = rng.normal(size=(200, 2))
    env = fit_mcd(x, seed=0)
    assert env.h == (200 + 2 + 1) // 2
    assert np.linalg.norm(env.mu_hat) <= 0.3
    assert np.linalg.norm(env.sigma_hat - np.eye(2)) <= 0.5


def test_mcd_planted_outliers():
    rng = np.random.default_rng(200)
    clean = rng.normal(size=(180, 2))
    outliers = rng.normal(size=(20, 2)) + np.array([50.0, 0.0])
    env = fit_mcd(np.vstack([clean, outliers]), seed=1)
    # oracle: mean of the clean subsample
    assert np.linalg.norm(env.mu_hat - clean.mean(axis=0)) <= 0.3
    naive = np.vstack([clean, outliers]).mean(axis=0)
    assert np.linalg.norm(naive - clean.mean(axis=0)) >= 4.0


def test_mcd_breakdown_insensitive_to_outlier_distance():
    rng = np.random.default_rng(300)
    clean = rng.normal(size=(440, 2))
    direction = np.array([1.0, 1.0]) / np.sqrt(2.0)
    mus = []
    for dist in (10.0, 50.0):
        outliers = rng.normal(size=(60, 2)) * 0.5 + dist * direction
        env = fit_mcd(np.vstack([clean, outliers]), seed=2)
        mus.append(env.mu_hat)
    assert np.linalg.norm(mus[0] - mus[1]) <= 0.1


def test_mcd_affine_equivariance():
    rng = np.random.default_rng(400)
    x = rng.normal(size=(250, 3))
    a = rng.normal(size=(3, 3)) + 2.0 * np.eye(3)
    b = rng.normal(size=3)
    m1 = fit_mcd(x, seed=5)
    m2 = fit_mcd(x @ a.T + b, seed=5)
    assert np.abs(m2.mu_hat - (a @ m1.mu_hat + b)).max() < 1e-6
    expected = a @ m1.sigma_hat @ a.T
    assert np.abs(m2.sigma_hat - expected).max() < 1e-6 * np.abs(expected).max()
    d1 = mahalanobis_sq_many(m1, x)
    d2 = mahalanobis_sq_many(m2, x @ a.T + b)
    assert np.abs(d1 - d2).max() < 1e-8


def test_mcd_deterministic_and_thread_invariant():
    rng = np.random.default_rng(500)
    x = rng.normal(size=(150, 2))
    m1 = fit_mcd(x, seed=9)
    m2 = fit_mcd(x, seed=9)
    m4 = fit_mcd(x, seed=9, threads=4)
    assert np.array_equal(m1.mu_hat, m2.mu_hat)
    assert np.array_equal(m1.sigma_hat, m2.sigma_hat)
    assert np.array_equal(m1.mu_hat, m4.mu_hat)
    assert np.array_equal(m1.sigma_hat, m4.sigma_hat)


def test_mcd_chi2_law_against_true_params():
    # clean Gaussian scored against the true parameters follows chi2_k
    rng = np.random.default_rng(600)
    for k in (2, 5):
        a = rng.normal(size=(k, k))
        sigma = a @ a.T + np.eye(k)
        mu = rng.normal(size=k)
        chol = np.linalg.cholesky(sigma)
        x = rng.normal(size=(10_000, k)) @ chol.T + mu
        env = envelope_from_params(mu, sigma)
        d_sq = mahalanobis_sq_many(env, x)
        assert ks_statistic(d_sq, lambda v: chi2_cdf(k, v)) <= 0.02


def test_mcd_estimator_chi2_consistency():
    # distances under the *fitted* envelope stay close to chi2 as well
    rng = np.random.default_rng(700)
    x = rng.normal(size=(5_000, 3))
    env = fit_mcd(x, seed=3)
    fresh = rng.normal(size=(5_000, 3))
    d_sq = mahalanobis_sq_many(env, fresh)
    assert ks_statistic(d_sq, lambda v: chi2_cdf(3, v)) <= 0.03


def test_mcd_input_validation():
    with pytest.raises(ValidationError):
        fit_mcd(np.ones((3, 2)), seed=0)  # n <= k+1
    with pytest.raises(ValidationError):
        fit_mcd(np.full((10, 2), np.nan), seed=0)
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        fit_mcd(rng.normal(size=(10, 2)), h_override=2, seed=0)


def test_mcd_constant_coordinate_survives_via_ridge():
    # one dead coordinate: the trace-relative ridge keeps the condition
    # number near k*1e9, inside the 1e12 gate, so the fit proceeds
    rng = np.random.default_rng(900)
    x = np.zeros((60, 2))
    x[:, 0] = rng.normal(size=60)
    env = fit_mcd(x, seed=0, n_starts=50)
    assert np.all(np.linalg.eigvalsh(env.sigma_hat) > 0)


def test_mcd_identical_points_error():
    # zero covariance everywhere: ridge has nothing to scale against
    with pytest.raises(NumericalError):
        fit_mcd(np.ones((30, 2)), seed=0, n_starts=5)


def test_consistency_factor_limits():
    assert consistency_factor(100, 100, 3) == 1.0
    assert consistency_factor(60, 100, 3) > 1.0


def test_mcd_h_override_full_sample():
    # h = n disables trimming: the fit is the classical unbiased covariance
    rng = np.random.default_rng(1000)
    x = rng.normal(size=(100, 2))
    env = fit_mcd(x, h_override=100, seed=0, n_starts=10, reweight=False)
    assert env.h == 100
    assert np.allclose(env.mu_hat, x.mean(axis=0), atol=1e-12)
    assert np.allclose(env.sigma_hat, np.cov(x, rowvar=False, ddof=1), atol=1e-12)


def test_calibrate_quantile_arithmetic():
    env = envelope_from_params(np.zeros(1), np.eye(1))
    # d^2 values are 1..100 for theta = sqrt(1..100)
    thetas = np.sqrt(np.arange(1.0, 101.0))[:, None]
    delta_sq = calibrate_delta_empirical(env, thetas, 0.05)
    assert delta_sq == pytest.approx(95.0, rel=1e-12)
    # exactly ceil(eps*n) training points sit strictly above the threshold
    flagged = np.count_nonzero(mahalanobis_sq_many(env, thetas) > delta_sq)
    assert flagged == 5


def test_calibrate_epsilon_domain():
    env = envelope_from_params(np.zeros(1), np.eye(1))
    thetas = np.random.default_rng(1).normal(size=(100, 1))
    calibrate_delta_empirical(env, thetas, 0.5)  # boundary is valid
    with pytest.raises(ValidationError):
        calibrate_delta_empirical(env, thetas, 0.6)
    with pytest.raises(ValidationError):
        calibrate_delta_empirical(env, thetas, 0.0)
    with pytest.raises(ValidationError):
        calibrate_delta_empirical(env, thetas[:5], 0.05)  # n < 1/eps


def test_calibrate_generalizes():
    rng = np.random.default_rng(800)
    x = rng.normal(size=(100_000, 2))
    env = fit_mcd(x, seed=4, n_starts=20)
    delta_sq = calibrate_delta_empirical(env, x, 0.01)
    fresh = rng.normal(size=(100_000, 2))
    rate = float(np.mean(mahalanobis_sq_many(env, fresh) > delta_sq))
    assert 0.005 <= rate <= 0.02
