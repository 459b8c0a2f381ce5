"""Iterative MLE / MAP solvers for the error-in-variables grid model.

All solvers share one outer loop that alternates two blocks:

* a voltage-noise step with a closed-form per-sample solution, and
* a parameter step minimizing a weighted least-squares quadratic plus the
  (possibly asymmetric) l1 prior penalties.

They differ only in how the parameter step treats the priors: `bcd` runs an
inner ADMM to convergence, `bar` takes one reweighted ridge solve, and `admm`
interleaves a single ADMM step per outer iteration (diagonal priors only).
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import NumericalError, StructureError, UnsupportedPriorError
from .estimators import EstimationResult, PriorStack, estimate_tls
from .phasors import (BlockCovariance, NoiseSpec, PhasorSeries,
                      assemble_block_covariance, center_voltages, debias)
from .vectorize import ReductionMap


@dataclass
class SolverConfig:
    """Knobs shared by all solver variants.

    Convergence requires both the relative objective change and the relative
    parameter change to stay below their tolerances for `window` consecutive
    outer iterations (after any penalty schedule has run out).
    """

    max_outer: int = 500
    tol_obj: float = 1e-9
    tol_param: float = 1e-7
    window: int = 10
    # penalty schedule: multiplier(k) = initial^(1 - k/steps), reaching 1
    # after `steps` outer iterations; initial = 1 disables it
    schedule_initial: float = 1.0
    schedule_steps: int = 20
    # inner ADMM (bcd runs it to this tolerance, admm takes single steps)
    admm_rho: float = 1.0
    admm_max_inner: int = 4000
    admm_tol: float = 1e-10
    # smoothing of the reweighted ridge denominator, relative to the initial
    # residual scale
    bar_alpha_rel: float = 1e-8
    # Anderson depth for the bar outer map; the plain alternation contracts
    # slowly when voltage and current noise are comparable. 0 disables.
    accel_memory: int = 5
    # bar only: eliminate the voltage-noise block analytically and refresh
    # the induced covariance once per outer iteration, averaging the noise
    # blocks over samples. Far faster when the alternation stalls.
    concentrated: bool = False


@dataclass
class SolverTrace:
    """Per-iteration diagnostics of one solver run."""

    objective: list = field(default_factory=list)
    param_change: list = field(default_factory=list)
    multiplier: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    residuals: list = field(default_factory=list)  # (primal, dual), admm only
    wall_time: float = 0.0

    @property
    def n_iterations(self) -> int:
        return len(self.objective)

    @property
    def iterations_per_second(self) -> float:
        if self.wall_time <= 0:
            return float("inf")
        return self.n_iterations / self.wall_time

    def to_csv(self, path) -> None:
        """Export iteration, objective, residuals and timing as CSV."""
        per_iter = (self.wall_time / self.n_iterations
                    if self.n_iterations else 0.0)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "objective", "param_change",
                        "multiplier", "inner_iterations",
                        "primal_residual", "dual_residual", "seconds"])
            for k in range(self.n_iterations):
                primal, dual = (self.residuals[k] if k < len(self.residuals)
                                else ("", ""))
                w.writerow([k, repr(self.objective[k]),
                            repr(self.param_change[k]),
                            repr(self.multiplier[k]),
                            self.inner_iterations[k], primal, dual,
                            repr((k + 1) * per_iter)])

    def is_monotone(self, rtol: float = 1e-10) -> bool:
        """True if the objective never increased (at a fixed multiplier)."""
        obj = np.asarray(self.objective)
        mult = np.asarray(self.multiplier)
        if obj.size < 2:
            return True
        scale = np.abs(obj).max() + 1e-300
        same = mult[1:] == mult[:-1]
        return bool(np.all(np.diff(obj)[same] <= rtol * scale))


@dataclass
class EivProblem:
    """Prepared data for the error-in-variables estimators.

    Voltages are expected debiased and centered; the covariances must come
    from the uncentered measurements.
    """

    V: np.ndarray  # complex (N, n), centered
    I: np.ndarray  # complex (N, n)
    sigma_v: BlockCovariance
    sigma_i: BlockCovariance
    rmap: ReductionMap
    priors: PriorStack | None = None

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=complex)
        self.I = np.asarray(self.I, dtype=complex)
        if self.V.shape != self.I.shape:
            raise StructureError("V and I must share dimensions")
        N, n = self.V.shape
        if self.rmap.n != n:
            raise StructureError("reduction map bus count does not match data")
        if (self.sigma_v.var_re.shape != (N, n)
                or self.sigma_i.var_re.shape != (N, n)):
            raise StructureError("covariance dimensions do not match data")
        if self.priors is not None:
            for t in self.priors:
                if t.dim != self.rmap.dim:
                    raise StructureError(
                        f"prior {t.kind!r} has dimension {t.dim}, "
                        f"expected {self.rmap.dim}")

    @classmethod
    def from_measurements(cls, series: PhasorSeries, spec: NoiseSpec,
                          rmap: ReductionMap, priors: PriorStack | None = None,
                          rated: float = 1.0) -> "EivProblem":
        """Debias, build covariances, and center a noisy measurement series."""
        sigma_v, sigma_i = assemble_block_covariance(series, spec)
        clean = debias(series, spec)
        V = center_voltages(clean.voltage, rated)
        return cls(V=V, I=clean.current, sigma_v=sigma_v, sigma_i=sigma_i,
                   rmap=rmap, priors=priors)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def _inverse_weights(cov: BlockCovariance):
    """(a, b, c) arrays of the blockwise inverse, or identity for zero noise.

    Returns (a, b, c, is_zero): the inverse 2x2 blocks are [[a, c], [c, b]]
    per (sample, bus).
    """
    vr, vi, cc = cov.var_re, cov.var_im, cov.cov_reim
    if vr.max() == 0 and vi.max() == 0:
        ones = np.ones_like(vr)
        return ones, ones, np.zeros_like(vr), True
    det = vr * vi - cc**2
    if det.min() <= 0:
        raise NumericalError("singular per-sample covariance block; mixed "
                             "zero/nonzero noise channels are not supported")
    return vi / det, vr / det, -cc / det, False


def _weighted_ssq(dr, di, a, b, c):
    """Sum over samples of [dr di] W [dr di]^T with 2x2 blocks [[a,c],[c,b]]."""
    return float(np.sum(a * dr**2 + b * di**2 + 2 * c * dr * di))


# ---------------------------------------------------------------------------
# Voltage-noise step
# ---------------------------------------------------------------------------

def dv_step(V, I, Y, wi, wv, v_noise_free: bool) -> np.ndarray:
    """Closed-form voltage-noise update: per-sample 2n x 2n solves.

    Minimizes the weighted residual of dI = (I - Y V) + Y dV jointly with the
    dV penalty; returns the complex (N, n) voltage-noise estimate.
    """
    N, n = V.shape
    if v_noise_free:
        return np.zeros((N, n), dtype=complex)
    ai, bi, ci, _ = wi
    av, bv, cv, _ = wv
    G, B = Y.real, Y.imag

    # Wi @ A batched over samples, A = [[G, -B], [B, G]]
    WiA = np.empty((N, 2 * n, 2 * n))
    WiA[:, :n, :n] = ai[:, :, None] * G + ci[:, :, None] * B
    WiA[:, :n, n:] = -ai[:, :, None] * B + ci[:, :, None] * G
    WiA[:, n:, :n] = ci[:, :, None] * G + bi[:, :, None] * B
    WiA[:, n:, n:] = -ci[:, :, None] * B + bi[:, :, None] * G
    A = np.block([[G, -B], [B, G]])
    M = A.T @ WiA  # (N, 2n, 2n)
    idx = np.arange(n)
    M[:, idx, idx] += av
    M[:, n + idx, n + idx] += bv
    M[:, idx, n + idx] += cv
    M[:, n + idx, idx] += cv

    R = I - V @ Y
    r_re, r_im = R.real, R.imag
    w_re = ai * r_re + ci * r_im
    w_im = ci * r_re + bi * r_im
    rhs = np.concatenate([w_re, w_im], axis=1) @ A  # (N, 2n), = A^T w per sample
    try:
        dv = np.linalg.solve(M, -rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        warnings.warn("singular per-sample system in the voltage-noise step; "
                      "adding a 1e-12 ridge", stacklevel=2)
        M[:, np.arange(2 * n), np.arange(2 * n)] += 1e-12
        dv = np.linalg.solve(M, -rhs[:, :, None])[:, :, 0]
    return dv[:, :n] + 1j * dv[:, n:]


# ---------------------------------------------------------------------------
# Parameter-step quadratic
# ---------------------------------------------------------------------------

def assemble_quadratic(Vhat, I, rmap: ReductionMap, wi):
    """Gram matrix and linear term of the weighted current residual.

    The residual as a function of the reduced parameters y is
    sum_h || i_h - R_h y_h ||^2_W = y^T H y - 2 g^T y + const, assembled bus
    by bus: each bus's current involves only its incident line parameters.
    """
    ai, bi, ci, _ = wi
    r = rmap.r
    H = np.zeros((2 * r, 2 * r))
    g = np.zeros(2 * r)
    incident = [[] for _ in range(rmap.n)]
    for l, (i, j) in enumerate(rmap.pairs):
        incident[i].append((l, j))
        incident[j].append((l, i))
    for h in range(rmap.n):
        lines = incident[h]
        if not lines:
            continue
        cols = [Vhat[:, h] - Vhat[:, k] for _, k in lines]
        M = np.column_stack(cols)  # (N, m)
        P, Q = M.real, M.imag
        a, b, c = ai[:, h], bi[:, h], ci[:, h]
        top = np.hstack([P, -Q])   # rows of R_h hitting Re(i_h)
        bot = np.hstack([Q, P])
        Wtop = a[:, None] * top + c[:, None] * bot
        Wbot = c[:, None] * top + b[:, None] * bot
        Gh = top.T @ Wtop + bot.T @ Wbot
        gh = Wtop.T @ I[:, h].real + Wbot.T @ I[:, h].imag
        gi = np.array([l for l, _ in lines] + [r + l for l, _ in lines])
        H[np.ix_(gi, gi)] += Gh
        g[gi] += gh
    return H, g


def _quad_solve(H, g):
    try:
        factor = sla.cho_factor(H)
        y = sla.cho_solve(factor, g)
        # one step of iterative refinement; the Gram system can be poorly
        # conditioned when bus voltages are strongly correlated
        y += sla.cho_solve(factor, g - H @ y)
        return y
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "singular parameter Gram matrix; the data do not excite every "
            "line parameter") from exc


def _noise_free_lstsq(V, I, rmap: ReductionMap) -> np.ndarray:
    """Direct least squares on the tall stacked system, for exact data.

    Avoids squaring the condition number through the Gram matrix; used when
    both noise covariances are zero and no priors are active.
    """
    N, n = V.shape
    r = rmap.r
    D = np.zeros((2 * N * n, 2 * r))
    b = np.concatenate([I.real.ravel(order="F"), I.imag.ravel(order="F")])
    for l, (i, j) in enumerate(rmap.pairs):
        for h, k in ((i, j), (j, i)):
            col = V[:, h] - V[:, k]
            D[h * N:(h + 1) * N, l] = col.real
            D[h * N:(h + 1) * N, r + l] = -col.imag
            D[N * n + h * N:N * n + (h + 1) * N, l] = col.imag
            D[N * n + h * N:N * n + (h + 1) * N, r + l] = col.real
    y, *_ = np.linalg.lstsq(D, b, rcond=None)
    return y


# ---------------------------------------------------------------------------
# Parameter-step strategies
# ---------------------------------------------------------------------------

def _asym_prox(r, t_plus, t_minus):
    """Prox of the asymmetric absolute value with per-side thresholds."""
    return np.where(r > t_plus, r - t_plus,
                    np.where(r < -t_minus, r + t_minus, 0.0))


def _subproblem_obj(H, g, y, stacked, mult):
    val = float(y @ (H @ y) - 2.0 * g @ y)
    if stacked is not None:
        L, mu, s_plus, s_minus = stacked
        res = L @ y - mu
        val += mult * float(np.sum(s_plus * np.maximum(res, 0)
                                   + s_minus * np.maximum(-res, 0)))
    return val


class _AdmmState:
    """Scaled-dual ADMM state for min y^T H y - 2 g^T y + asym-l1(L y - mu)."""

    def __init__(self, stacked, dim):
        self.L, self.mu, self.s_plus, self.s_minus = stacked
        self.z = np.zeros(self.L.shape[0])
        self.u = np.zeros(self.L.shape[0])
        self.LtL = (self.L.T @ self.L).tocsr()
        self.dim = dim

    def factor(self, H, rho):
        return sla.cho_factor(2.0 * H + rho * self.LtL.toarray())

    def step(self, factor, g, rho, mult, warm_z=True):
        y = sla.cho_solve(factor, 2.0 * g + rho * (self.L.T @ (self.z - self.u + self.mu)))
        r = self.L @ y - self.mu
        z_old = self.z
        self.z = _asym_prox(r + self.u, mult * self.s_plus / rho,
                            mult * self.s_minus / rho)
        self.u = self.u + r - self.z
        primal = np.linalg.norm(r - self.z)
        dual = rho * np.linalg.norm(self.L.T @ (self.z - z_old))
        return y, primal, dual

    def balance(self, rho, primal, dual):
        """Residual-balancing rho adaptation (factor 2 at ratio 10)."""
        if primal > 10.0 * dual:
            self.u = self.u / 2.0
            return rho * 2.0
        if dual > 10.0 * primal:
            self.u = self.u * 2.0
            return rho / 2.0
        return rho


def _rho_for(H, cfg):
    # scale the penalty parameter with the quadratic's magnitude
    dim = H.shape[0]
    return cfg.admm_rho * max(np.trace(H) / dim, 1e-300)


def _ystep_bcd(H, g, stacked, mult, y_warm, cfg):
    """Inner ADMM run to tolerance; never returns a worse point than y_warm."""
    if stacked is None:
        return _quad_solve(H, g), 0
    state = _AdmmState(stacked, H.shape[0])
    rho = _rho_for(H, cfg)
    factor = state.factor(H, rho)
    scale = max(np.linalg.norm(g), 1.0)
    y = y_warm
    it = 0
    for it in range(1, cfg.admm_max_inner + 1):
        y, primal, dual = state.step(factor, g, rho, mult)
        if max(primal, dual) <= cfg.admm_tol * scale:
            break
        if it % 50 == 0:
            rho_new = state.balance(rho, primal, dual)
            if rho_new != rho:
                rho = rho_new
                factor = state.factor(H, rho)
    # inexact inner solves must not break outer monotonicity
    if _subproblem_obj(H, g, y, stacked, mult) > _subproblem_obj(H, g, y_warm,
                                                                 stacked, mult):
        return y_warm, it
    return y, it


def _ystep_bar(H, g, stacked, mult, y_prev, alpha):
    """One reweighted ridge solve, linearizing each |.| at the previous point."""
    if stacked is None:
        return _quad_solve(H, g)
    L, mu, s_plus, s_minus = stacked
    res = L @ y_prev - mu
    slope = np.where(res >= 0, s_plus, s_minus)
    d = mult * slope / (np.abs(res) + alpha)
    A = 2.0 * H + (L.T @ sp.diags(d) @ L).toarray()
    rhs = 2.0 * g + L.T @ (d * mu)
    try:
        return sla.cho_solve(sla.cho_factor(A), rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular reweighted ridge system") from exc


class _Concentrated:
    """Moment-space model of the likelihood with the voltage noise eliminated.

    Solving out the voltage-noise block leaves f(y) = sum_t r_t^T S^{-1} r_t
    with r_t = i_t - A(y) v_t and S(y) = Sigma_i + A Sigma_v A^T in the real
    stacked bus space; everything reduces to the data's second moments, so f
    and its exact gradient cost O(n^3) independent of the sample count. The
    parameter step minimizes a quadratic model using the frozen-S Gram

        H = E (M_vv kron S^-1) E^T

    as the metric (E maps reduced parameters to ve(A)) with the linear term
    shifted so the model gradient matches the exact one; the fixed points are
    then true stationary points even though S moves with y. The per-sample
    noise blocks are averaged over samples, which perturbs the weighting by
    O(sigma) relative to the exact likelihood.
    """

    def __init__(self, problem):
        V, I = problem.V, problem.I
        n = V.shape[1]
        self.n = n
        vt = np.hstack([V.real, V.imag])  # (N, 2n)
        it = np.hstack([I.real, I.imag])
        self.Mvv = vt.T @ vt
        self.Miv = it.T @ vt
        self.Mii = it.T @ it
        self.Si = self._mean_cov(problem.sigma_i)
        self.Sv = self._mean_cov(problem.sigma_v)
        dim = problem.rmap.dim
        E = np.empty((dim, 4 * n * n))
        for a in range(dim):
            e = np.zeros(dim)
            e[a] = 1.0
            E[a] = self._A(problem.rmap.expand_admittance(e)).ravel(order="F")
        self.E = E

    def _mean_cov(self, sigma):
        n = self.n
        S = np.zeros((2 * n, 2 * n))
        idx = np.arange(n)
        S[idx, idx] = sigma.var_re.mean(axis=0)
        S[n + idx, n + idx] = sigma.var_im.mean(axis=0)
        S[idx, n + idx] = S[n + idx, idx] = sigma.cov_reim.mean(axis=0)
        return S

    @staticmethod
    def _A(Y):
        G, B = Y.real, Y.imag
        return np.block([[G, -B], [B, G]])

    def _pieces(self, Y):
        A = self._A(Y)
        Sinv = np.linalg.inv(self.Si + A @ self.Sv @ A.T)
        C = (self.Mii - A @ self.Miv.T - self.Miv @ A.T
             + A @ self.Mvv @ A.T)
        return A, Sinv, C

    def value(self, Y) -> float:
        _, Sinv, C = self._pieces(Y)
        return float(np.sum(Sinv * C))

    def model(self, Y, y):
        """(H, g, f) such that y'Hy - 2g'y has the exact gradient at y."""
        A, Sinv, C = self._pieces(Y)
        f = float(np.sum(Sinv * C))
        H = self.E @ np.kron(self.Mvv, Sinv) @ self.E.T
        H = 0.5 * (H + H.T)
        # guard against numerically semidefinite Grams at extrapolated points
        H[np.diag_indices_from(H)] += 1e-12 * max(np.trace(H) / H.shape[0],
                                                  1e-300)
        # d tr(S^-1 C) = tr(S^-1 dC) - tr(S^-1 dS S^-1 C)
        GA = 2.0 * (Sinv @ (A @ self.Mvv - self.Miv)) \
            - 2.0 * (Sinv @ C @ Sinv @ A @ self.Sv)
        grad = self.E @ GA.ravel(order="F")
        return H, H @ y - 0.5 * grad, f


class _Anderson:
    """Anderson extrapolation of a fixed-point map from recent iterates.

    Restarts whenever the fixed-point residual grows, so a bad extrapolation
    can cost at most one plain iteration.
    """

    def __init__(self, memory: int):
        self.memory = memory
        self.ys: list = []
        self.fs: list = []

    def push(self, y, g):
        f = g - y
        if self.fs and np.linalg.norm(f) > np.linalg.norm(self.fs[-1]):
            self.ys, self.fs = [], []
        self.ys.append(g)
        self.fs.append(f)
        if len(self.fs) > self.memory + 1:
            self.ys.pop(0)
            self.fs.pop(0)

    def next_point(self):
        if len(self.fs) < 2:
            return self.ys[-1]
        dF = np.column_stack([b - a for a, b in zip(self.fs, self.fs[1:])])
        dG = np.column_stack([b - a for a, b in zip(self.ys, self.ys[1:])])
        gamma, *_ = np.linalg.lstsq(dF, self.fs[-1], rcond=None)
        p = self.ys[-1] - dG @ gamma
        if not np.all(np.isfinite(p)):
            self.ys, self.fs = self.ys[-1:], self.fs[-1:]
            return self.ys[-1]
        return p


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

def lambda_multiplier(k: int, cfg: SolverConfig) -> float:
    """Penalty continuation factor at outer iteration k."""
    if cfg.schedule_initial == 1.0 or cfg.schedule_steps <= 0:
        return 1.0
    frac = min(k, cfg.schedule_steps) / cfg.schedule_steps
    return float(cfg.schedule_initial ** (1.0 - frac))


def _objective(problem, Y, dv, wi, wv, mult):
    dI = problem.I - (problem.V - dv) @ Y
    ai, bi, ci, i_free = wi
    av, bv, cv, v_free = wv
    obj = _weighted_ssq(dI.real, dI.imag, ai, bi, ci)
    if not v_free:
        obj += _weighted_ssq(dv.real, dv.imag, av, bv, cv)
    if problem.priors is not None:
        obj += problem.priors.penalty(_reduced(problem, Y), mult)
    return obj


def _reduced(problem, Y):
    return problem.rmap.reduce_admittance(Y)


def solve_eiv(problem: EivProblem, method: str = "bcd",
              config: SolverConfig | None = None,
              y0: np.ndarray | None = None) -> EstimationResult:
    """Run the alternating EIV solver.

    :param method: "bcd" (inner ADMM to tolerance), "bar" (one reweighted
        ridge solve per outer iteration), or "admm" (one ADMM step per outer
        iteration; diagonal priors only).
    :param y0: initial reduced parameter vector; defaults to the TLS estimate.
    """
    cfg = config or SolverConfig()
    if method not in ("bcd", "bar", "admm"):
        raise StructureError(f"unknown solver method {method!r}")

    stacked = None
    if problem.priors is not None and len(problem.priors):
        if method == "admm" and not problem.priors.is_diagonal:
            raise UnsupportedPriorError(
                "the single-step admm solver supports only diagonal priors; "
                "use bcd or bar")
        stacked = problem.priors.stacked()

    if y0 is None:
        y0 = _reduced(problem, estimate_tls(problem.V, problem.I).Y)
    y = np.asarray(y0, dtype=float).copy()
    if y.size != problem.rmap.dim:
        raise StructureError("initial point has the wrong dimension")

    wi = _inverse_weights(problem.sigma_i)
    wv = _inverse_weights(problem.sigma_v)

    if stacked is None and wi[3] and wv[3] and problem.V.size <= 2_000_000:
        # exact data, no priors: one direct least-squares solve suffices
        start = time.perf_counter()
        y = _noise_free_lstsq(problem.V, problem.I, problem.rmap)
        Y = problem.rmap.expand_admittance(y)
        trace = SolverTrace(
            objective=[_objective(problem, Y, np.zeros_like(problem.V),
                                  wi, wv, 1.0)],
            param_change=[0.0], multiplier=[1.0], inner_iterations=[0],
            wall_time=time.perf_counter() - start)
        return EstimationResult(
            y=y, Y=Y, method=method, reduction=problem.rmap,
            objective_trace=np.asarray(trace.objective),
            diagnostics={"converged": True, "iterations": 1,
                         "iterations_per_second": trace.iterations_per_second,
                         "inner_iterations_total": 0, "monotone": True,
                         "wall_time": trace.wall_time,
                         "dv": np.zeros_like(problem.V), "trace": trace})

    trace = SolverTrace()
    admm_state = None
    admm_rho_mult = 1.0
    alpha = None
    if stacked is not None:
        L, mu, _, _ = stacked
        alpha = cfg.bar_alpha_rel * max(np.abs(L @ y - mu).max(), 1e-300)
        if method == "admm":
            admm_state = _AdmmState(stacked, problem.rmap.dim)

    start = time.perf_counter()
    flat = 0
    converged = False
    accel = _Anderson(cfg.accel_memory) if (method == "bar"
                                            and cfg.accel_memory > 0) else None
    conc = None
    if cfg.concentrated:
        if method != "bar":
            raise StructureError(
                "concentrated weighting is only available for the bar solver")
        conc = _Concentrated(problem)
    for k in range(cfg.max_outer):
        mult = lambda_multiplier(k, cfg)
        Y = problem.rmap.expand_admittance(y)
        if conc is None:
            dv = dv_step(problem.V, problem.I, Y, wi, wv, wv[3])
            H, g = assemble_quadratic(problem.V - dv, problem.I,
                                      problem.rmap, wi)
        else:
            H, g, f_cur = conc.model(Y, y)

        inner = 0
        if method == "bcd":
            y_new, inner = _ystep_bcd(H, g, stacked, mult, y, cfg)
        elif method == "bar":
            y_new = _ystep_bar(H, g, stacked, mult, y, alpha)
        else:
            if stacked is None:
                y_new = _quad_solve(H, g)
            else:
                rho = _rho_for(H, cfg) * admm_rho_mult
                # H changes every outer iteration; refactor each time
                y_new, primal, dual = admm_state.step(
                    admm_state.factor(H, rho), g, rho, mult)
                trace.residuals.append((primal, dual))
                admm_rho_mult *= admm_state.balance(rho, primal, dual) / rho
                inner = 1

        Y_new = problem.rmap.expand_admittance(y_new)
        if conc is None:
            obj = _objective(problem, Y_new, dv, wi, wv, mult)
        else:
            def total(yv, Yv):
                pen = (problem.priors.penalty(yv, mult)
                       if problem.priors is not None else 0.0)
                return conc.value(Yv) + pen

            # the model step can overshoot when S moves quickly; halve back
            # toward the current iterate until the exact objective improves
            target = f_cur + (problem.priors.penalty(y, mult)
                              if problem.priors is not None else 0.0)
            obj = total(y_new, Y_new)
            for _ in range(30):
                if obj <= target:
                    break
                y_new = 0.5 * (y + y_new)
                Y_new = problem.rmap.expand_admittance(y_new)
                obj = total(y_new, Y_new)
        dpar = np.linalg.norm(y_new - y) / max(np.linalg.norm(y), 1e-300)
        if (method == "bcd" and trace.objective
                and mult == trace.multiplier[-1]):
            prev = trace.objective[-1]
            assert obj <= prev + 1e-10 * max(abs(prev), 1.0), \
                f"internal error: bcd objective rose from {prev!r} to {obj!r}"
        trace.objective.append(obj)
        trace.param_change.append(dpar)
        trace.multiplier.append(mult)
        trace.inner_iterations.append(inner)
        if accel is not None and mult == lambda_multiplier(k + 1, cfg):
            accel.push(y, y_new)
            y_next = accel.next_point()
            if conc is not None and y_next is not y_new:
                # extrapolations are cheap to vet against the exact objective
                Y_next = problem.rmap.expand_admittance(y_next)
                if total(y_next, Y_next) > obj:
                    y_next = y_new
            y = y_next
        else:
            y = y_new

        if trace.n_iterations >= 2:
            prev = trace.objective[-2]
            dobj = abs(obj - prev) / max(abs(prev), 1e-300)
            if (dobj < cfg.tol_obj and dpar < cfg.tol_param
                    and mult == lambda_multiplier(k + 1, cfg)):
                flat += 1
            else:
                flat = 0
            if flat >= cfg.window:
                converged = True
                break
    trace.wall_time = time.perf_counter() - start
    if not converged:
        warnings.warn(f"{method} solver hit max_outer={cfg.max_outer} without "
                      "meeting the convergence criteria", stacklevel=2)

    Y = problem.rmap.expand_admittance(y)
    dv = dv_step(problem.V, problem.I, Y, wi, wv, wv[3])
    return EstimationResult(
        y=y, Y=Y, method=method, reduction=problem.rmap,
        objective_trace=np.asarray(trace.objective),
        diagnostics={"converged": converged,
                     "iterations": trace.n_iterations,
                     "iterations_per_second": trace.iterations_per_second,
                     "inner_iterations_total": int(sum(trace.inner_iterations)),
                     "monotone": trace.is_monotone(),
                     "wall_time": trace.wall_time,
                     "dv": dv,
                     "trace": trace})


def solve_bcd(problem, config=None, y0=None) -> EstimationResult:
    """Block coordinate descent: exact (to tolerance) parameter steps."""
    return solve_eiv(problem, "bcd", config, y0)


def solve_bar(problem, config=None, y0=None) -> EstimationResult:
    """Alternating reweighted ridge: cheapest per-iteration parameter step."""
    return solve_eiv(problem, "bar", config, y0)


def solve_admm(problem, config=None, y0=None) -> EstimationResult:
    """Interleaved single ADMM steps; requires diagonal prior matrices."""
    return solve_eiv(problem, "admm", config, y0)
