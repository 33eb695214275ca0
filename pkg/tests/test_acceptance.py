"""Acceptance gate: every criterion below runs at its stated tolerance and
prints one [ACCEPTANCE] line. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import math
import time

import numpy as np
import pytest

from tesda import detector
from tesda._special import chi2_cdf
from tesda.dct import dct2, idct2
from tesda.detector import DetectionReport, DetectorConfig
from tesda.pca import fit_pca, project
from tesda.robust import envelope_from_params, fit_mcd, mahalanobis_sq_many
from tesda.synth import (
    FrequencyInject,
    MeanShift,
    SyntheticSpec,
    chi2_quantile,
    generate,
    ks_statistic,
)
from tesda.thresholds import (
    delta_chebyshev,
    delta_chernoff,
    delta_subexponential,
    lambert_w_minus1,
)

SEED = 20240901


def _ok(name):
    print(f"\n[ACCEPTANCE] {name}: PASS")


# --------------------------------------------------------------- bounds


def test_bound_soundness_grid():
    t0 = time.time()
    draws = 1_000_000
    rng = np.random.default_rng(SEED)
    n_cheb = 100_000
    for k in (2, 4, 8, 16):
        sample = rng.chisquare(k, size=draws)
        exact_cache = {}
        for eps in (0.01, 0.05, 0.1):
            che = delta_chebyshev(k, n_cheb, eps)
            sub = delta_subexponential(k, eps)
            chn = delta_chernoff(k, eps)
            for res in (che, sub, chn):
                p_hat = float(np.mean(sample >= res.delta_sq))
                se = math.sqrt(max(p_hat * (1 - p_hat), 1e-12) / draws)
                assert p_hat <= eps + 3 * se, (k, eps, res.bound_kind, p_hat)
            assert chn.delta <= sub.delta * (1 + 1e-12), (k, eps)
            assert chn.delta <= che.delta * (1 + 1e-12), (k, eps)
            exact = exact_cache.setdefault(eps, chi2_quantile(k, 1.0 - eps))
            for res in (che, sub, chn):
                assert res.delta_sq >= exact, (k, eps, res.bound_kind)
    elapsed = time.time() - t0
    assert elapsed < 60.0, f"bound soundness grid took {elapsed:.1f}s"
    _ok(f"bound soundness (12-cell grid, 1e6 draws, {elapsed:.1f}s < 60s)")


def test_chi2_law_of_squared_distances():
    rng = np.random.default_rng(SEED + 1)
    for k in (2, 5, 10):
        a = rng.normal(size=(k, k))
        sigma = a @ a.T + np.eye(k)
        mu = rng.normal(size=k)
        x = rng.normal(size=(10_000, k)) @ np.linalg.cholesky(sigma).T + mu
        env = envelope_from_params(mu, sigma)
        d_sq = mahalanobis_sq_many(env, x)
        ks = ks_statistic(d_sq, lambda v: chi2_cdf(k, v))
        assert ks <= 0.02, (k, ks)
    _ok("clean-Gaussian d^2 follows chi2_k (KS <= 0.02, k in {2,5,10})")


def test_lambert_identity_grid():
    assert abs(lambert_w_minus1(-math.exp(-1.0)) - (-1.0)) <= 1e-8
    grid = np.linspace(-math.exp(-1.0) + 1e-9, -1e-12, 1000)
    worst = 0.0
    for a in grid:
        w = lambert_w_minus1(float(a))
        worst = max(worst, abs(w * math.exp(w) - a) / abs(a))
    assert worst <= 1e-12, worst
    _ok(f"Lambert W_-1 identity on 1000-point grid (worst rel err {worst:.2e})")


# ------------------------------------------------------------------ MCD


def test_mcd_robustness_replicates():
    rng = np.random.default_rng(SEED + 2)
    for rep in range(20):
        clean = rng.normal(size=(425, 2))
        outliers = rng.normal(size=(75, 2)) + np.array([50.0, 0.0])
        x = np.vstack([clean, outliers])
        env = fit_mcd(x, seed=rep)
        assert np.linalg.norm(env.mu_hat - clean.mean(axis=0)) <= 0.3, rep
        assert np.linalg.norm(env.sigma_hat - np.eye(2)) <= 0.5, rep
        assert np.linalg.norm(x.mean(axis=0) - clean.mean(axis=0)) >= 4.0, rep
    _ok("MCD robustness (n=500, 15% outliers at 50 sigma, 20/20 replicates)")


def test_mcd_affine_equivariance():
    rng = np.random.default_rng(SEED + 3)
    x = rng.normal(size=(400, 3))
    a = rng.normal(size=(3, 3)) + 2.5 * np.eye(3)
    assert abs(np.linalg.det(a)) > 1e-6
    b = rng.normal(size=3)
    m1 = fit_mcd(x, seed=77)
    m2 = fit_mcd(x @ a.T + b, seed=77)
    mu_expect = a @ m1.mu_hat + b
    sig_expect = a @ m1.sigma_hat @ a.T
    assert np.abs(m2.mu_hat - mu_expect).max() <= 1e-6 * max(1.0, np.abs(mu_expect).max())
    assert np.abs(m2.sigma_hat - sig_expect).max() <= 1e-6 * np.abs(sig_expect).max()
    _ok("MCD affine equivariance (1e-6 relative)")


# ------------------------------------------------------------ transforms


@pytest.mark.parametrize("shape", [(2, 2), (4, 4), (8, 8), (7, 5)])
def test_dct_contracts(shape):
    rng = np.random.default_rng(SEED + 4)
    img = rng.normal(size=shape)
    assert np.abs(idct2(dct2(img)) - img).max() <= 1e-10
    assert float((dct2(img) ** 2).sum()) == pytest.approx(float((img ** 2).sum()), rel=1e-10)
    c = -2.25
    coeffs = dct2(np.full(shape, c))
    assert abs(coeffs[0, 0] - c * math.sqrt(shape[0] * shape[1])) <= 1e-12
    off = coeffs.copy()
    off[0, 0] = 0.0
    assert np.abs(off).max() <= 1e-12
    if shape == (7, 5):
        _ok("DCT round-trip/Parseval/constant-DC on {2x2,4x4,8x8,7x5}")


def test_pca_contracts():
    rng = np.random.default_rng(SEED + 5)
    rows = rng.normal(size=(500, 6)) @ rng.normal(size=(6, 6)) + rng.normal(size=6)
    model = fit_pca(rows)
    assert np.abs(model.basis.T @ model.basis - np.eye(6)).max() <= 1e-8
    for row in rows[:20]:
        recon = model.mean + model.basis @ project(model, row)
        assert np.linalg.norm(recon - row) <= 1e-9 * max(1.0, np.linalg.norm(row))
    assert np.all(np.diff(model.energies) <= 1e-12)
    line = np.array([[t, 2.0 * t] for t in (-2.0, -1.0, 0.0, 1.0, 2.0)])
    assert fit_pca(line).energies[1] < 1e-12
    _ok("PCA orthonormality/reconstruction/energy order/rank-1")


# ----------------------------------------------------------- end-to-end


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    layers = ((8, 4, 4), (8, 4, 4))
    attack_spec = SyntheticSpec(layers=layers, n_train=5000, n_clean=5000, n_attacked=5000,
                                attack=MeanShift(magnitude=5.0), seed=SEED)
    train, test, attacked = generate(attack_spec, root / "attack")
    # same seed -> identical per-layer fields, so this attacked split is a
    # true null attack against the same clean distribution
    null_spec = SyntheticSpec(layers=layers, n_train=50, n_clean=50, n_attacked=5000,
                              attack=MeanShift(magnitude=0.0), seed=SEED)
    _, _, null_attacked = generate(null_spec, root / "null")
    t0 = time.time()
    cfg = DetectorConfig(epsilon=0.01, seed=7, mcd_n_starts=500, threads=1)
    det = detector.fit(cfg, train)
    report = detector.evaluate(det, test, attacked)
    pipeline_seconds = time.time() - t0
    return det, train, test, attacked, null_attacked, report, pipeline_seconds


def test_end_to_end_detection(e2e):
    det, _, _, _, null_attacked, report, pipeline_seconds = e2e
    assert report.coverage >= 0.99, report
    assert 0.002 <= report.fpr <= 0.03, report
    null_report = detector.evaluate(det, *_null_pair(e2e))
    se3 = 3.0 * math.sqrt(0.01 * 0.99 / 5000)
    assert abs(null_report.coverage - 0.01) <= se3, null_report
    assert pipeline_seconds < 120.0, pipeline_seconds
    _ok(f"end-to-end 5-sigma detection (coverage={report.coverage:.4f}, "
        f"fpr={report.fpr:.4f}, null={null_report.coverage:.4f}, "
        f"fit+eval {pipeline_seconds:.0f}s < 120s)")


def _null_pair(e2e):
    _, _, test, _, null_attacked, _, _ = e2e
    return test, null_attacked


def test_calibration_exactness(e2e):
    det, train = e2e[0], e2e[1]
    n = train.n
    flags = {}
    for eps in (0.004, 0.01, 0.02, 0.04):
        recal = detector.recalibrate(det, eps)
        env = recal.envelopes[0]
        d_sq = mahalanobis_sq_many(env, recal.thetas_train[0])
        idx = frozenset(np.flatnonzero(d_sq > env.delta_sq))
        assert len(idx) == math.ceil(eps * n), (eps, len(idx))
        flags[eps] = idx
    sweep = sorted(flags)
    for lo, hi in zip(sweep, sweep[1:]):
        assert flags[lo] <= flags[hi], (lo, hi)
    _ok("empirical calibration flags exactly ceil(eps*n); nesting exact on 4-point sweep")


def test_metrics_arithmetic():
    rep = DetectionReport.from_counts(tp=99, fn=1, fp=2, tn=98, epsilon=0.01)
    assert abs(rep.coverage - 0.99) <= 1e-12
    assert abs(rep.fpr - 0.02) <= 1e-12
    expect_f1 = 2.0 * (99.0 / 101.0) * 0.99 / ((99.0 / 101.0) + 0.99)
    assert abs(rep.f1 - expect_f1) <= 1e-12
    assert abs(rep.f1 - 0.9850746268656716) <= 1e-12
    _ok("metrics arithmetic (TP=99,FN=1,FP=2,TN=98 -> 0.99 / 0.02 / 0.98507)")


def test_ablation_layer_localization(tmp_path):
    spec = SyntheticSpec(layers=((6, 4, 4), (6, 4, 4)), n_train=2000, n_clean=1000,
                         n_attacked=1000, attack=MeanShift(magnitude=5.0, layer=1),
                         seed=SEED + 6)
    train, test, attacked = generate(spec, tmp_path)
    cfg = DetectorConfig(epsilon=0.01, seed=9, mcd_n_starts=100)
    by_layer = dict(detector.ablate_layers(cfg, train, test, attacked))
    assert by_layer["conv1"].coverage >= 0.95, by_layer["conv1"]
    assert by_layer["conv0"].coverage <= 0.10, by_layer["conv0"]
    _ok(f"layer ablation localization (attacked={by_layer['conv1'].coverage:.3f}, "
        f"other={by_layer['conv0'].coverage:.3f})")


def test_ablation_dct_peak(tmp_path):
    spec = SyntheticSpec(layers=((6, 4, 4),), n_train=1500, n_clean=800, n_attacked=800,
                         attack=FrequencyInject(ordinal=5, amplitude=8.0), seed=SEED + 7)
    train, test, attacked = generate(spec, tmp_path)
    cfg = DetectorConfig(epsilon=0.01, seed=10, mcd_n_starts=60)
    rows = detector.ablate_dct(cfg, train, test, attacked, ordinals=range(8))
    coverages = {o: rep.coverage for o, rep in rows}
    assert max(coverages, key=coverages.get) == 5, coverages
    _ok(f"DCT ablation peaks at injected ordinal 5 (coverage {coverages[5]:.3f})")
