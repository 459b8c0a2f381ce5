import json

import numpy as np
import pytest
import scipy.linalg
import scipy.optimize

from conftest import random_laplacian
from gridid.errors import NumericalError, StructureError
from gridid.estimators import (EstimationResult, estimate_ols, estimate_tls,
                               frobenius_error, mle_negloglik,
                               ols_tls_covariance, support_metrics)
from gridid.grid import load_matrix_triplets
from gridid.phasors import (BlockCovariance, NoiseSpec, PhasorSeries,
                            assemble_block_covariance, corrupt)


def random_instance(n, N, rng, noise=0.0):
    Y = random_laplacian(n, rng)
    V = 1.0 + 0.05 * (rng.standard_normal((N, n))
                      + 1j * rng.standard_normal((N, n)))
    I = V @ Y
    if noise:
        V = V + noise * (rng.standard_normal((N, n))
                         + 1j * rng.standard_normal((N, n)))
        I = I + noise * (rng.standard_normal((N, n))
                         + 1j * rng.standard_normal((N, n)))
    return V, I, Y


# ---------------------------------------------------------------------------
# OLS
# ---------------------------------------------------------------------------

def test_ols_exact_recovery(exact_run9):
    res = estimate_ols(exact_run9.exact.voltage, exact_run9.exact.current)
    assert frobenius_error(res.Y, exact_run9.truth.matrix) < 1e-10


def test_ols_unbiased_under_current_noise():
    rng = np.random.default_rng(0)
    n, N, trials = 2, 40, 200
    V, _, Y = random_instance(n, N, rng)
    acc = np.zeros((n, n), dtype=complex)
    for _ in range(trials):
        I = V @ Y + 0.01 * (rng.standard_normal((N, n))
                            + 1j * rng.standard_normal((N, n)))
        acc += estimate_ols(V, I).Y
    mean = acc / trials
    # standard error of the trial mean, estimated from the OLS covariance scale
    se = 0.01 * np.sqrt(2.0 / (N * trials)) / np.abs(V - V.mean(0)).min()
    assert np.abs(mean - Y).max() < 3 * se * 50  # loose bound, bias would be O(1)
    assert frobenius_error(mean, Y) < 0.02


def test_ols_attenuation_bias_under_voltage_noise():
    rng = np.random.default_rng(1)
    n, N = 3, 5000
    Y = random_laplacian(n, rng)
    V = 1.0 + 0.01 * (rng.standard_normal((N, n))
                      + 1j * rng.standard_normal((N, n)))
    I = V @ Y
    Vn = V + 0.05 * (rng.standard_normal((N, n))
                     + 1j * rng.standard_normal((N, n)))
    res = estimate_ols(Vn, I)
    assert np.linalg.norm(res.Y) < 0.5 * np.linalg.norm(Y)


def test_ols_singular_gram_names_unloaded_buses():
    rng = np.random.default_rng(2)
    V = rng.standard_normal((20, 2)) + 1j * rng.standard_normal((20, 2))
    V = np.column_stack([V, 0.5 * V[:, 0] + 0.5 * V[:, 1]])
    with pytest.raises(NumericalError, match="unloaded"):
        estimate_ols(V, np.zeros_like(V))


# ---------------------------------------------------------------------------
# TLS
# ---------------------------------------------------------------------------

def test_tls_exact_recovery(exact_run9):
    res = estimate_tls(exact_run9.exact.voltage, exact_run9.exact.current)
    assert frobenius_error(res.Y, exact_run9.truth.matrix) < 1e-10
    assert np.abs(res.diagnostics["sigma_min"]).max() < 1e-8


def tls_column_oracle(Vc, b):
    """Direct minimization of the definitional per-column TLS objective.

    The constrained problem min ||[dV, di]||_F^2 s.t. b - di = (Vc - dV) y
    concentrates to ||Vc y - b||^2 / (1 + ||y||^2).
    """
    n = Vc.shape[1]

    def obj(x):
        y = x[:n] + 1j * x[n:]
        return (np.linalg.norm(Vc @ y - b) ** 2
                / (1.0 + np.linalg.norm(y) ** 2))

    y0, *_ = np.linalg.lstsq(Vc, b, rcond=None)
    x0 = np.concatenate([y0.real, y0.imag])
    out = scipy.optimize.minimize(obj, x0, method="Nelder-Mead",
                                  options={"xatol": 1e-12, "fatol": 1e-14,
                                           "maxiter": 50000})
    return out.x[:n] + 1j * out.x[n:]


def test_tls_matches_definitional_minimum():
    rng = np.random.default_rng(3)
    for trial in range(10):
        n = int(rng.integers(1, 4))
        N = int(rng.integers(n + 2, 11))
        V, I, Y = random_instance(n, N, rng, noise=0.01)
        res = estimate_tls(V, I)
        Vc = V - V.mean(axis=0)
        Ic = I - I.mean(axis=0)
        for i in range(n):
            y_direct = tls_column_oracle(Vc, Ic[:, i])
            assert np.abs(res.Y[:, i] - y_direct).max() < 1e-6


def test_tls_sigma_matches_independent_svd():
    rng = np.random.default_rng(4)
    V, I, _ = random_instance(3, 30, rng, noise=0.01)
    res = estimate_tls(V, I)
    Vc = V - V.mean(axis=0)
    Ic = I - I.mean(axis=0)
    for i in range(3):
        s = scipy.linalg.svdvals(np.column_stack([Vc, Ic[:, i]]))
        assert abs(res.diagnostics["sigma_min"][i] - s[-1]) < 1e-12


def test_tls_warns_on_degenerate_trailing_singular_values():
    rng = np.random.default_rng(10)
    A = rng.standard_normal((6, 3)) + 1j * rng.standard_normal((6, 3))
    A = A - A.mean(axis=0)  # zero-mean columns survive the internal centering
    Q, _ = np.linalg.qr(A)
    M = Q @ np.diag([3.0, 1.0, 1.0 + 1e-12])
    V = M[:, :2]
    I = np.column_stack([M[:, 2], M[:, 2]])
    with pytest.warns(UserWarning, match="non-unique"):
        with np.errstate(all="ignore"):
            try:
                estimate_tls(V, I)
            except np.linalg.LinAlgError:
                pass


# ---------------------------------------------------------------------------
# error covariance
# ---------------------------------------------------------------------------

def test_tls_covariance_dominates_ols():
    rng = np.random.default_rng(5)
    V, I, _ = random_instance(3, 50, rng, noise=0.01)
    tls = estimate_tls(V, I)
    cov_tls = ols_tls_covariance(V, tls)
    ols = estimate_ols(V, I)
    ols.diagnostics["sigma_min"] = tls.diagnostics["sigma_min"]
    cov_ols = ols_tls_covariance(V, ols)
    for i in range(3):
        d_tls = np.diag(cov_tls[i]).real
        d_ols = np.diag(cov_ols[i]).real
        assert np.all(d_tls >= d_ols - 1e-18)


def test_covariance_zero_at_zero_noise(exact_run9):
    V = exact_run9.exact.voltage
    res = estimate_tls(V, exact_run9.exact.current)
    cov = ols_tls_covariance(V, res)
    assert np.abs(cov).max() < 1e-12


def test_covariance_requires_sigmas():
    rng = np.random.default_rng(6)
    V, I, _ = random_instance(2, 20, rng, noise=0.01)
    with pytest.raises(StructureError):
        ols_tls_covariance(V, estimate_ols(V, I))


def test_tls_covariance_tracks_monte_carlo():
    rng = np.random.default_rng(7)
    n, N, sig = 2, 200, 0.02
    Y = random_laplacian(n, rng)
    V0 = 1.0 + 0.2 * (rng.standard_normal((N, n))
                      + 1j * rng.standard_normal((N, n)))
    I0 = V0 @ Y
    draws = []
    last = None
    for _ in range(500):
        V = V0 + sig / np.sqrt(2) * (rng.standard_normal((N, n))
                                     + 1j * rng.standard_normal((N, n)))
        I = I0 + sig / np.sqrt(2) * (rng.standard_normal((N, n))
                                     + 1j * rng.standard_normal((N, n)))
        last = estimate_tls(V, I)
        draws.append(last.Y[:, 0])
    emp = np.var(np.array(draws), axis=0)
    cov = ols_tls_covariance(V0, last)
    pred = np.diag(cov[0]).real
    ratio = emp / pred
    assert np.all(ratio > 0.5) and np.all(ratio < 2.0)


# ---------------------------------------------------------------------------
# likelihood, metrics, results
# ---------------------------------------------------------------------------

def identity_cov(N, n):
    one = np.ones((N, n))
    return BlockCovariance(one, one, np.zeros((N, n)))


def test_negloglik_zero_noise_vectors():
    cov = identity_cov(4, 2)
    assert mle_negloglik(np.zeros(16), np.zeros(16), cov, cov) == 0.0


def test_negloglik_identity_covariance_is_ssq():
    rng = np.random.default_rng(8)
    cov = identity_cov(4, 2)
    dv = rng.standard_normal(16)
    di = rng.standard_normal(16)
    expect = np.sum(dv**2) + np.sum(di**2)
    assert abs(mle_negloglik(dv, di, cov, cov) - expect) < 1e-12


def test_negloglik_matches_dense_oracle():
    rng = np.random.default_rng(9)
    V = 1 + 0.1 * rng.standard_normal((3, 2)) \
        + 0.1j * rng.standard_normal((3, 2))
    I = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    series = corrupt(PhasorSeries.from_complex(V, I),
                     NoiseSpec.uniform(1e-2, seed=1))
    sv, si = assemble_block_covariance(series, NoiseSpec.uniform(1e-2))
    dv = rng.standard_normal(sv.size)
    di = rng.standard_normal(si.size)
    dense = (di @ np.linalg.solve(si.dense(), di)
             + dv @ np.linalg.solve(sv.dense(), dv))
    assert abs(mle_negloglik(dv, di, sv, si) - dense) < 1e-10 * abs(dense)


def test_negloglik_dimension_mismatch():
    cov = identity_cov(4, 2)
    with pytest.raises(StructureError):
        mle_negloglik(np.zeros(10), np.zeros(16), cov, cov)


def test_frobenius_error_values():
    Y = np.array([[2.0, -2.0], [-2.0, 2.0]])
    assert frobenius_error(Y, Y) == 0.0
    assert frobenius_error(np.zeros_like(Y), Y) == 1.0
    assert abs(frobenius_error(2 * Y, Y) - 1.0) < 1e-15
    assert abs(frobenius_error(3 * Y, 3 * Y + 0.0) - frobenius_error(Y, Y)) == 0


def test_support_metrics():
    Y = np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    perfect = support_metrics(Y, Y)
    assert perfect == {"precision": 1.0, "recall": 1.0}
    dense = np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, -0.5], [-1.0, -0.5, 1.0]])
    m = support_metrics(dense, Y)
    assert m["recall"] == 1.0 and m["precision"] < 1.0


def test_result_save_round_trip(tmp_path):
    Y = np.array([[1.0 + 1j, -1 - 1j], [-1 - 1j, 1 + 1j]])
    res = EstimationResult(y=np.ones(2), Y=Y, method="ols")
    res.with_truth(Y)
    res.save(tmp_path / "run")
    back = load_matrix_triplets(tmp_path / "run.yhat.txt")
    assert np.allclose(back, Y)
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["method"] == "ols"
    assert meta["eps_f"] == 0.0
