"""End-to-end statistical acceptance checks.

Each test prints one summary line (criterion number, PASS/FAIL, key numbers)
before asserting, so a full run gives a compact scoreboard with `pytest -s`.
The noise-sweep and prior-injection tests dominate the runtime.
"""

import time

import numpy as np
import pytest
import scipy.optimize

from conftest import random_laplacian
from gridid.estimators import (default_map_priors, estimate_ols, estimate_tls,
                               fisher_column, fisher_mle, frobenius_error,
                               prior_known_values)
from gridid.phasors import (BlockCovariance, NoiseSpec, bias_significance,
                            cartesian_moments_exact)
from gridid.simulator import (LoadParams, Scenario, generate_feeder,
                              run_scenario)
from gridid.solvers import (EivProblem, SolverConfig, dv_step, solve_admm,
                            solve_bar, solve_bcd, _inverse_weights, _objective)
from gridid.vectorize import build_reduction


def report(num, label, ok, detail):
    print(f"criterion {num} ({label}): {'PASS' if ok else 'FAIL'} [{detail}]")
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# 1. analytic noise moments vs Monte Carlo
# ---------------------------------------------------------------------------

def test_criterion_01_noise_moments():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    n_draws = 10**6
    worst = 0.0
    for _ in range(20):
        v = float(rng.uniform(0.5, 1.5))
        theta = float(rng.uniform(-np.pi, np.pi))
        sig_mag = float(rng.uniform(1e-5, 1e-2))
        sig_ph = float(rng.uniform(1e-5, 1e-2))
        m = cartesian_moments_exact(v, theta, sig_mag, sig_ph)
        vm = v + sig_mag * rng.standard_normal(n_draws)
        th = theta + sig_ph * rng.standard_normal(n_draws)
        z = vm * np.exp(1j * th) - v * np.exp(1j * theta)
        dc, dd = z.real, z.imag
        se_mean = np.array([dc.std(), dd.std()]) / np.sqrt(n_draws)
        worst = max(worst,
                    abs(dc.mean() - m.mean[0]) / se_mean[0],
                    abs(dd.mean() - m.mean[1]) / se_mean[1])
        cov_mc = np.cov(dc, dd)
        for (i, j) in ((0, 0), (1, 1), (0, 1)):
            se = np.sqrt((cov_mc[i, i] * cov_mc[j, j] + cov_mc[i, j]**2)
                         / n_draws)
            worst = max(worst, abs(cov_mc[i, j] - m.cov[i, j]) / se)
    dt = time.perf_counter() - t0
    report(1, "noise moments", worst < 4.0 and dt < 60.0,
           f"worst {worst:.2f} SE, {dt:.0f}s")


# ---------------------------------------------------------------------------
# 2. attenuation-bias significance at device accuracy
# ---------------------------------------------------------------------------

def test_criterion_02_bias_ratio():
    spec = NoiseSpec(sigma_mag_v=4e-4, sigma_phase_v=np.deg2rad(0.01))
    ratio = bias_significance(spec, v=1.0)
    ok = abs(ratio - 8.72e-5) < 0.02 * 8.72e-5
    report(2, "bias ratio", ok, f"{ratio:.4e}")


# ---------------------------------------------------------------------------
# 3. zero-noise consistency of OLS / TLS / BCD
# ---------------------------------------------------------------------------

def test_criterion_03_zero_noise(exact_run9):
    t0 = time.perf_counter()
    Y = exact_run9.truth.matrix
    V, I = exact_run9.V, exact_run9.I
    errs = {"ols": frobenius_error(estimate_ols(V, I).Y, Y),
            "tls": frobenius_error(estimate_tls(V, I).Y, Y)}
    prob = EivProblem(V=V, I=I, sigma_v=exact_run9.sigma_v,
                      sigma_i=exact_run9.sigma_i,
                      rmap=build_reduction(exact_run9.truth.n))
    errs["bcd"] = frobenius_error(solve_bcd(prob).Y, Y)
    worst = max(errs.values())
    dt = time.perf_counter() - t0
    report(3, "zero-noise recovery", worst < 1e-8 and dt < 60.0,
           " ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f", {dt:.0f}s")


# ---------------------------------------------------------------------------
# 4. closed-form TLS vs direct definitional minimization
# ---------------------------------------------------------------------------

def _tls_column_oracle(Vc, b):
    # the constrained problem min ||[dV, di]||_F^2 s.t. b - di = (Vc - dV) y
    # concentrates to ||Vc y - b||^2 / (1 + ||y||^2)
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


def test_criterion_04_tls_equivalence():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(1, 4))
        N = int(rng.integers(n + 2, 11))
        Y = random_laplacian(n, rng) if n > 1 else np.array([[1.0 - 0.5j]])
        V = 1.0 + 0.05 * (rng.standard_normal((N, n))
                          + 1j * rng.standard_normal((N, n)))
        I = V @ Y
        V = V + 0.01 * (rng.standard_normal((N, n))
                        + 1j * rng.standard_normal((N, n)))
        I = I + 0.01 * (rng.standard_normal((N, n))
                        + 1j * rng.standard_normal((N, n)))
        res = estimate_tls(V, I)
        Vc = V - V.mean(axis=0)
        Ic = I - I.mean(axis=0)
        for i in range(n):
            y_direct = _tls_column_oracle(Vc, Ic[:, i])
            worst = max(worst, np.abs(res.Y[:, i] - y_direct).max())
    report(4, "TLS equivalence", worst < 1e-6, f"worst {worst:.2e}")


# ---------------------------------------------------------------------------
# 5. Fisher information block structure and covariance ordering
# ---------------------------------------------------------------------------

def test_criterion_05_fisher():
    n, N = 4, 50
    rng = np.random.default_rng(11)
    Y = random_laplacian(n, rng)
    V = 1.0 + 0.1 * (rng.standard_normal((N, n))
                     + 1j * rng.standard_normal((N, n)))
    sv = BlockCovariance(np.full((N, n), 1e-6), np.full((N, n), 1e-6),
                         np.zeros((N, n)))
    sv0 = BlockCovariance(np.zeros((N, n)), np.zeros((N, n)),
                          np.zeros((N, n)))
    si = BlockCovariance(np.full((N, n), 1e-6), np.full((N, n), 1e-6),
                         np.zeros((N, n)))
    F = fisher_mle(V, Y, sv, si)
    mask = np.zeros_like(F, dtype=bool)
    for h in range(n):
        sl_re = slice(h * n, (h + 1) * n)
        sl_im = slice(n * n + h * n, n * n + (h + 1) * n)
        for a in (sl_re, sl_im):
            for b in (sl_re, sl_im):
                mask[a, b] = True
    cross = np.abs(F[~mask]).max()

    # covariance ordering under column scalings. The per-sample information
    # blocks are only jointly positive definite when the voltage noise
    # vanishes, so the covariance comparison is run there; with voltage
    # noise and zero Re/Im cross-covariance the information-side ordering
    # (larger column -> smaller information) still holds and is also checked.
    F0 = fisher_mle(V, Y, sv0, si)
    min_eig = np.inf
    info_eig = np.inf
    for _ in range(20):
        h = int(rng.integers(n))
        c = 1.0 + 3.0 * rng.random()
        Y2 = Y.copy()
        Y2[:, h] = c * Y2[:, h]
        C1 = np.linalg.inv(fisher_column(F0, h, n))
        C2 = np.linalg.inv(fisher_column(fisher_mle(V, Y2, sv0, si), h, n))
        min_eig = min(min_eig, np.linalg.eigvalsh(C2 - C1).min())
        I1 = fisher_column(F, h, n)
        I2 = fisher_column(fisher_mle(V, Y2, sv, si), h, n)
        scale = np.abs(I1).max()
        info_eig = min(info_eig, np.linalg.eigvalsh(I1 - I2).min() / scale)
    ok = cross == 0.0 and min_eig >= -1e-10 and info_eig >= -1e-10
    report(5, "Fisher structure", ok,
           f"cross {cross:.1e}, cov eig {min_eig:.2e}, "
           f"info eig {info_eig:.2e}")


# ---------------------------------------------------------------------------
# 6. estimator ordering and noise sweep on the 15-bus feeder
# ---------------------------------------------------------------------------

SIGMAS = (1e-6, 1e-5, 1e-4, 2e-4)


def _joint_objective(prob, y):
    wi = _inverse_weights(prob.sigma_i)
    wv = _inverse_weights(prob.sigma_v)
    Y = prob.rmap.expand_admittance(y)
    dv = dv_step(prob.V, prob.I, Y, wi, wv, wv[3])
    return _objective(prob, Y, dv, wi, wv, 1.0)


def _map_estimate(res, rmap):
    """TLS-pilot MAP: concentrated and plain runs, best joint objective."""
    tls = estimate_tls(res.V, res.I)
    y_tls = rmap.reduce_admittance(tls.Y)
    priors = default_map_priors(rmap, y_tls, tls.Y, 10.0, 0.0)
    prob = EivProblem(V=res.V, I=res.I, sigma_v=res.sigma_v,
                      sigma_i=res.sigma_i, rmap=rmap, priors=priors)
    cands = [solve_bar(prob, SolverConfig(max_outer=500, concentrated=True),
                       y0=y_tls.copy()),
             solve_bar(prob, SolverConfig(max_outer=150), y0=y_tls.copy())]
    objs = [_joint_objective(prob, c.y) for c in cands]
    return cands[int(np.argmin(objs))], tls


def test_criterion_06_noise_sweep():
    t0 = time.perf_counter()
    topo = generate_feeder(15, seed=21)
    rmap = build_reduction(15)
    eps = {m: {s: [] for s in SIGMAS} for m in ("ols", "tls", "map")}
    for seed in range(5):
        for sigma in SIGMAS:
            sc = Scenario(topology=topo,
                          load=LoadParams(mean_power=0.02, volatility=0.5,
                                          reversion_time=60.0, resolution=0.1,
                                          seed=100 + seed),
                          noise=NoiseSpec.uniform(sigma, seed=200 + seed),
                          n_samples=4000, window=10,
                          name=f"sweep-{seed}-{sigma:g}")
            res = run_scenario(sc)
            Y = res.truth.matrix
            best, tls = _map_estimate(res, rmap)
            eps["ols"][sigma].append(
                frobenius_error(estimate_ols(res.V, res.I).Y, Y))
            eps["tls"][sigma].append(frobenius_error(tls.Y, Y))
            eps["map"][sigma].append(frobenius_error(best.Y, Y))
    med = {m: [float(np.median(eps[m][s])) for s in SIGMAS]
           for m in ("ols", "tls", "map")}
    o, t, m = (med[k][SIGMAS.index(1e-4)] for k in ("ols", "tls", "map"))
    ordered = m < t < o and m < 0.5 * t
    monotone = all(all(a < b for a, b in zip(med[k], med[k][1:]))
                   for k in ("ols", "tls", "map"))
    dt = time.perf_counter() - t0
    report(6, "noise sweep", ordered and monotone and dt < 1800.0,
           f"at 1e-4: ols={o:.4f} tls={t:.4f} map={m:.4f}; "
           f"monotone={monotone}, {dt:.0f}s")


# ---------------------------------------------------------------------------
# 7. known-value priors on lines at the lowest-load buses
# ---------------------------------------------------------------------------

def test_criterion_07_prior_injection():
    topo = generate_feeder(15, seed=21)
    n = 15
    rmap = build_reduction(n)
    cfg = SolverConfig(max_outer=500, concentrated=True)
    incident = {h: [] for h in range(n)}
    for ln in topo.lines:
        incident[ln.from_bus].append((ln.from_bus, ln.to_bus))
        incident[ln.to_bus].append((ln.from_bus, ln.to_bus))

    eps = {"none": [], "lowest": [], "random": []}
    for seed in range(5):
        sc = Scenario(topology=topo,
                      load=LoadParams(mean_power=0.02, volatility=0.5,
                                      reversion_time=60.0, resolution=0.1,
                                      spread=0.6, seed=300 + seed),
                      noise=NoiseSpec.uniform(2e-4, seed=400 + seed),
                      n_samples=1500, window=10, name=f"inject-{seed}")
        res = run_scenario(sc)
        Y = res.truth.matrix
        y_true = rmap.reduce_admittance(Y)
        tls = estimate_tls(res.V, res.I)
        y_tls = rmap.reduce_admittance(tls.Y)

        # rank buses by realized mean drawn power; slack excluded
        v = res.exact.v_mag * np.exp(1j * res.exact.v_ang)
        i = res.exact.i_mag * np.exp(1j * res.exact.i_ang)
        p = (v * np.conj(i)).real.mean(axis=0)
        order = np.argsort(np.abs(p[1:])) + 1
        low_lines, seen = [], set()
        for h in order:
            for pq in incident[h]:
                if pq not in seen:
                    low_lines.append(pq)
                    seen.add(pq)
                    break
            if len(low_lines) == 5:
                break
        rng = np.random.default_rng(500 + seed)
        all_lines = [(ln.from_bus, ln.to_bus) for ln in topo.lines]
        rand_lines = [all_lines[k] for k in
                      rng.choice(len(all_lines), 5, replace=False)]

        def known(lines):
            ent = []
            for pq in lines:
                a = rmap.pair_index(*pq)
                ent.append((a, y_true[a], 100.0))
                ent.append((rmap.r + a, y_true[rmap.r + a], 100.0))
            return prior_known_values(ent, rmap.dim, 10.0)

        for name, lines in (("none", None), ("lowest", low_lines),
                            ("random", rand_lines)):
            priors = default_map_priors(rmap, y_tls, tls.Y, 10.0, 0.0)
            if lines is not None:
                priors.add(known(lines))
            prob = EivProblem(V=res.V, I=res.I, sigma_v=res.sigma_v,
                              sigma_i=res.sigma_i, rmap=rmap, priors=priors)
            m = solve_bar(prob, config=cfg, y0=y_tls.copy())
            eps[name].append(frobenius_error(m.Y, Y))
    med = {k: float(np.median(v)) for k, v in eps.items()}
    ok = med["lowest"] < med["none"] and med["lowest"] < med["random"]
    report(7, "prior injection", ok,
           f"lowest={med['lowest']:.4f} random={med['random']:.4f} "
           f"none={med['none']:.4f}")


# ---------------------------------------------------------------------------
# 8. solver speed ordering on the 9-bus benchmark
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bench_run(feeder9):
    """9-bus, 400-sample benchmark scenario shared by the solver tests."""
    sc = Scenario(topology=feeder9,
                  load=LoadParams(volatility=0.4, reversion_time=60.0,
                                  seed=11),
                  noise=NoiseSpec(1e-6, 1e-6, 1e-4, 1e-4, seed=3),
                  n_samples=400, window=10, name="bench")
    return run_scenario(sc)


def test_criterion_08_solver_speed(bench_run):
    res = bench_run
    rmap = build_reduction(res.truth.n)
    prob = EivProblem(V=res.V, I=res.I, sigma_v=res.sigma_v,
                      sigma_i=res.sigma_i, rmap=rmap)
    pilot = solve_bar(prob, config=SolverConfig(max_outer=3000))
    priors = default_map_priors(rmap, pilot.y, pilot.Y, 1e-3, 0.0)
    prob = EivProblem(V=res.V, I=res.I, sigma_v=res.sigma_v,
                      sigma_i=res.sigma_i, rmap=rmap, priors=priors)
    runs = {}
    for name, solver, cfg in (
            ("bcd", solve_bcd, SolverConfig()),
            ("bar", solve_bar, SolverConfig(max_outer=3000)),
            ("admm", solve_admm, SolverConfig(max_outer=20000))):
        r = solver(prob, config=cfg, y0=pilot.y.copy())
        runs[name] = r.diagnostics
    rate = (runs["bar"]["iterations_per_second"]
            / runs["bcd"]["iterations_per_second"])
    more_iters = runs["admm"]["iterations"] > runs["bar"]["iterations"]
    converged = all(runs[k]["converged"] for k in runs)
    ok = rate >= 5.0 and more_iters and converged
    report(8, "solver speed", ok,
           f"bar/bcd it/s ratio {rate:.1f}, "
           f"admm {runs['admm']['iterations']} vs "
           f"bar {runs['bar']['iterations']} iterations, "
           f"all converged={converged}")


# ---------------------------------------------------------------------------
# 9. structural identities
# ---------------------------------------------------------------------------

def test_criterion_09_structural(feeder9):
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 9))
        rmap = build_reduction(n)
        y_r = rmap.reduce_admittance(random_laplacian(n, rng))
        y = rmap.expand(y_r)
        worst = max(worst, abs(np.abs(y).sum() - 4 * np.abs(y_r).sum())
                    / np.abs(y).sum())
    sc = Scenario(topology=feeder9, noise=NoiseSpec(),
                  load=LoadParams(volatility=0.4, reversion_time=60.0,
                                  seed=11),
                  n_samples=400, unloaded=(4, 7), name="kron")
    res = run_scenario(sc)
    V, I = res.exact.voltage, res.exact.current
    kron_res = np.abs(I - V @ res.truth.matrix.T).max()
    ok = worst < 1e-12 and kron_res < 1e-10
    report(9, "structural identities", ok,
           f"norm ratio dev {worst:.1e}, kron residual {kron_res:.1e}")


# ---------------------------------------------------------------------------
# 10. solver sanity: monotonicity, agreement, determinism
# ---------------------------------------------------------------------------

def test_criterion_10_solver_sanity(bench_run):
    res = bench_run
    rmap = build_reduction(res.truth.n)
    prob = EivProblem(V=res.V, I=res.I, sigma_v=res.sigma_v,
                      sigma_i=res.sigma_i, rmap=rmap)
    bcd = solve_bcd(prob, config=SolverConfig(max_outer=10000))
    bar = solve_bar(prob, config=SolverConfig(max_outer=3000))
    admm = solve_admm(prob, config=SolverConfig(max_outer=10000))
    monotone = bcd.diagnostics["monotone"]
    scale = np.abs(bcd.y).max()
    agree = max(np.abs(bcd.y - bar.y).max(),
                np.abs(bcd.y - admm.y).max()) / scale
    again = solve_bar(prob, config=SolverConfig(max_outer=3000))
    deterministic = np.array_equal(bar.y, again.y)
    ok = monotone and agree < 1e-3 and deterministic
    report(10, "solver sanity", ok,
           f"monotone={monotone}, agreement {agree:.1e}, "
           f"deterministic={deterministic}")
