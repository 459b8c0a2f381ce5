"""Closed-form estimators, likelihood machinery, Fisher information, and priors.

The error-in-variables model relates noisy data matrices through
I - dI = (V - dV) Y. OLS ignores the voltage noise, TLS removes its bias,
and the maximum-likelihood / maximum-a-posteriori estimators weight the
residuals with the per-sample noise covariances. Prior beliefs about the
parameters enter as weighted l1 terms lam * ||L y - mu||_1, optionally with
asymmetric per-side slopes for sign constraints.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, StructureError
from .grid import save_matrix_triplets
from .phasors import BlockCovariance
from .vectorize import ReductionMap, real_stack


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

@dataclass
class PriorTerm:
    """One l1 prior: contribution lam * ||L y - mu||_1 to the negative log-posterior.

    `w_plus` / `w_minus` are per-row slope multipliers for the positive and
    negative side of each residual, used to encode asymmetric (sign) priors;
    both default to one, which recovers the plain absolute value.
    """

    L: sp.csr_matrix
    mu: np.ndarray
    lam: float
    kind: str = "generic"
    w_plus: np.ndarray | None = None
    w_minus: np.ndarray | None = None

    def __post_init__(self):
        self.L = sp.csr_matrix(self.L)
        self.mu = np.asarray(self.mu, dtype=float)
        if self.L.shape[0] != self.mu.size:
            raise StructureError("row count of L must match length of mu")
        if self.lam < 0:
            raise StructureError("lambda must be non-negative")
        if self.w_plus is None:
            self.w_plus = np.ones(self.L.shape[0])
        if self.w_minus is None:
            self.w_minus = np.ones(self.L.shape[0])

    @property
    def dim(self) -> int:
        return self.L.shape[1]

    @property
    def is_diagonal(self) -> bool:
        """True if every row of L touches at most one parameter."""
        return bool(np.all(np.diff(self.L.indptr) <= 1))

    def residual(self, y: np.ndarray) -> np.ndarray:
        return self.L @ y - self.mu

    def penalty(self, y: np.ndarray, multiplier: float = 1.0) -> float:
        r = self.residual(y)
        return float(self.lam * multiplier
                     * np.sum(self.w_plus * np.maximum(r, 0)
                              + self.w_minus * np.maximum(-r, 0)))


@dataclass
class PriorStack:
    """An ordered collection of independent priors; penalties add up."""

    terms: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.terms)

    def __len__(self):
        return len(self.terms)

    def add(self, term: PriorTerm) -> "PriorStack":
        self.terms.append(term)
        return self

    def penalty(self, y: np.ndarray, multiplier: float = 1.0) -> float:
        return sum(t.penalty(y, multiplier) for t in self.terms)

    @property
    def is_diagonal(self) -> bool:
        return all(t.is_diagonal for t in self.terms)

    def stacked(self):
        """All rows stacked: (L, mu, slope_plus, slope_minus) with lam folded in."""
        if not self.terms:
            raise StructureError("empty prior stack")
        L = sp.vstack([t.L for t in self.terms]).tocsr()
        mu = np.concatenate([t.mu for t in self.terms])
        sp_plus = np.concatenate([t.lam * t.w_plus for t in self.terms])
        sp_minus = np.concatenate([t.lam * t.w_minus for t in self.terms])
        return L, mu, sp_plus, sp_minus


def prior_known_values(entries, dim: int, lam: float) -> PriorTerm:
    """Prior pinning a set of parameters to known values.

    :param entries: iterable of (index, value, confidence); the confidence
        scales the corresponding row.
    """
    entries = list(entries)
    rows, cols, vals, mu = [], [], [], []
    for r, (idx, value, conf) in enumerate(entries):
        if not 0 <= idx < dim:
            raise StructureError(f"parameter index {idx} out of range")
        rows.append(r)
        cols.append(idx)
        vals.append(conf)
        mu.append(conf * value)
    L = sp.csr_matrix((vals, (rows, cols)), shape=(len(entries), dim))
    return PriorTerm(L, np.asarray(mu), lam, kind="known_values")


def prior_sparsity(pattern: np.ndarray, lam: float) -> PriorTerm:
    """Zero-centered l1 prior with a per-parameter strength pattern.

    Pattern values: 0 leaves a parameter unpenalized (known line), 1 is the
    plain sparsity penalty, and a large K marks a known-absent line.
    """
    pattern = np.asarray(pattern, dtype=float)
    L = sp.diags(pattern).tocsr()
    return PriorTerm(L, np.zeros(pattern.size), lam, kind="sparsity")


def prior_signs(s: np.ndarray, lam: float, K: float | None = None) -> PriorTerm:
    """Skewed l1 prior encoding believed parameter signs.

    A candidate with the believed sign pays the plain lam*|y|; a wrong-signed
    one pays an extra 2K|y|. K defaults to 1e4 * lam.
    """
    s = np.asarray(s, dtype=float)
    if not np.all(np.isin(s, (-1.0, 1.0))):
        raise StructureError("sign vector entries must be +1 or -1")
    if K is None:
        K = 1e4 * lam
    wrong = 1.0 + 2.0 * K / lam if lam > 0 else 1.0 + 2.0 * K
    w_plus = np.where(s > 0, 1.0, wrong)
    w_minus = np.where(s > 0, wrong, 1.0)
    L = sp.eye(s.size, format="csr")
    return PriorTerm(L, np.zeros(s.size), lam, kind="signs",
                     w_plus=w_plus, w_minus=w_minus)


def prior_ratio(h: int, k: int, rho: float, dim: int, lam: float) -> PriorTerm:
    """Prior on the ratio of two parameters: penalizes |rho*y_h - y_k|."""
    L = sp.csr_matrix(([rho, -1.0], ([0, 0], [h, k])), shape=(1, dim))
    return PriorTerm(L, np.zeros(1), lam, kind="ratio")


def prior_rx(rho: float, dim: int, lam: float) -> PriorTerm:
    """Constant-ratio prior between the real and imaginary parameter halves.

    Penalizes |rho * Re(y_j) - Im(y_j)| for every complex parameter, so for a
    line with admittance g + jb the prior is satisfied when b = rho * g. For
    a cable with resistance/reactance ratio R/X = r this means rho = -1/r.
    """
    half = dim // 2
    rows = np.concatenate([np.arange(half), np.arange(half)])
    cols = np.concatenate([np.arange(half), half + np.arange(half)])
    vals = np.concatenate([np.full(half, rho), np.full(half, -1.0)])
    L = sp.csr_matrix((vals, (rows, cols)), shape=(half, dim))
    return PriorTerm(L, np.zeros(half), lam, kind="rx_ratio")


def prior_adaptive(y_mle: np.ndarray, lam: float,
                   floor: float | None = None) -> PriorTerm:
    """Adaptive-lasso style prior: weights inverse to the MLE magnitudes."""
    y_mle = np.asarray(y_mle, dtype=float)
    scale = np.abs(y_mle).max()
    if scale == 0:
        raise NumericalError("adaptive prior undefined for an all-zero estimate")
    if floor is None:
        floor = 1e-8 * scale
    w = 1.0 / np.maximum(np.abs(y_mle), floor)
    L = sp.diags(w).tocsr()
    return PriorTerm(L, np.zeros(y_mle.size), lam, kind="adaptive")


def gamma_hat(y_mle: np.ndarray, s: np.ndarray) -> float:
    """Estimate of ||y||_1 corrected for wrong-signed errors on zero entries."""
    y_mle = np.asarray(y_mle, dtype=float)
    s = np.asarray(s, dtype=float)
    return float(np.sum(np.abs(y_mle))
                 - np.sum(np.abs(y_mle) * np.abs(s - np.sign(y_mle))))


def prior_contrast(gamma: float, s: np.ndarray, lam_prime: float) -> PriorTerm:
    """Prior centering the signed parameter sum s^T y on gamma."""
    if gamma <= 0:
        raise NumericalError("contrast prior needs a positive gamma estimate")
    s = np.asarray(s, dtype=float)
    L = sp.csr_matrix(s.reshape(1, -1))
    return PriorTerm(L, np.array([gamma]), lam_prime / gamma, kind="contrast")


def prior_nondiag(Y_mle_diag: np.ndarray, rmap: ReductionMap,
                  lam_prime: float) -> PriorTerm:
    """Prior tying each bus's summed line admittances to the MLE diagonal.

    For a Laplacian matrix the diagonal equals the sum of incident line
    admittances, so each row penalizes the relative deviation of that sum
    from the MLE diagonal estimate, separately for the real and imaginary
    channel.
    """
    diag = np.asarray(Y_mle_diag, dtype=complex)
    n = rmap.n
    if diag.size != n:
        raise StructureError("diagonal length must match bus count")
    rows, cols, vals, mu = [], [], [], []
    row = 0
    for h in range(n):
        incident = [l for l, (i, j) in enumerate(rmap.pairs) if h in (i, j)]
        for half, denom in ((0, diag[h].real), (1, diag[h].imag)):
            if abs(denom) < 1e-12 * max(1.0, np.abs(diag).max()):
                warnings.warn(f"skipping non-diagonal prior row for bus {h}: "
                              "near-zero MLE diagonal", stacklevel=2)
                continue
            for l in incident:
                rows.append(row)
                cols.append(half * rmap.r + l)
                vals.append(1.0 / denom)
            mu.append(1.0)
            row += 1
    L = sp.csr_matrix((vals, (rows, cols)), shape=(row, rmap.dim))
    return PriorTerm(L, np.asarray(mu), lam_prime, kind="nondiag")


def default_map_priors(rmap: ReductionMap, y_mle: np.ndarray,
                       Y_mle: np.ndarray, lam: float,
                       lam_prime: float = 0.0) -> PriorStack:
    """The standard prior stack: adaptive sparsity, signs, non-diagonal sum.

    Signs follow the physical convention for lines: non-negative
    conductances, non-positive susceptances.
    """
    stack = PriorStack()
    if lam > 0:
        stack.add(prior_adaptive(y_mle, lam))
        s = np.concatenate([np.ones(rmap.r), -np.ones(rmap.r)])
        stack.add(prior_signs(s, lam))
    if lam_prime > 0:
        stack.add(prior_nondiag(np.diag(np.asarray(Y_mle)), rmap, lam_prime))
    return stack


# ---------------------------------------------------------------------------
# Estimation results
# ---------------------------------------------------------------------------

@dataclass
class EstimationResult:
    """Estimated parameters with the reconstructed admittance matrix."""

    y: np.ndarray
    Y: np.ndarray
    method: str
    reduction: ReductionMap | None = None
    eps_f: float | None = None
    fisher: np.ndarray | None = None
    objective_trace: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def with_truth(self, Y_true: np.ndarray) -> "EstimationResult":
        self.eps_f = frobenius_error(self.Y, Y_true)
        return self

    def save(self, prefix) -> None:
        """Write `<prefix>.yhat.txt` (triplets) and `<prefix>.json` metadata."""
        save_matrix_triplets(self.Y, f"{prefix}.yhat.txt")
        meta = {"method": self.method, "eps_f": self.eps_f,
                "diagnostics": {k: v for k, v in self.diagnostics.items()
                                if isinstance(v, (int, float, str, bool))}}
        if self.objective_trace is not None:
            meta["iterations"] = int(len(self.objective_trace))
        with open(f"{prefix}.json", "w") as f:
            json.dump(meta, f, indent=2)


def frobenius_error(Y_hat: np.ndarray, Y_true: np.ndarray) -> float:
    """Relative Frobenius error ||Y_hat - Y|| / ||Y||."""
    Y_hat = np.asarray(Y_hat)
    Y_true = np.asarray(Y_true)
    return float(np.linalg.norm(Y_hat - Y_true) / np.linalg.norm(Y_true))


def support_metrics(Y_hat: np.ndarray, Y_true: np.ndarray,
                    rel_tol: float = 1e-3) -> dict:
    """Precision/recall of the recovered off-diagonal support."""
    n = Y_true.shape[0]
    off = ~np.eye(n, dtype=bool)
    thresh = rel_tol * np.abs(Y_true).max()
    est = np.abs(np.asarray(Y_hat)[off]) > thresh
    act = np.abs(np.asarray(Y_true)[off]) > thresh
    tp = int((est & act).sum())
    precision = tp / est.sum() if est.sum() else 1.0
    recall = tp / act.sum() if act.sum() else 1.0
    return {"precision": float(precision), "recall": float(recall)}


# ---------------------------------------------------------------------------
# Closed-form least squares
# ---------------------------------------------------------------------------

def _center(M: np.ndarray) -> np.ndarray:
    return M - M.mean(axis=0, keepdims=True)


def estimate_ols(V: np.ndarray, I: np.ndarray) -> EstimationResult:
    """Column-wise ordinary least squares on mean-centered data.

    Ignores voltage noise; biased whenever the regressors are noisy.
    """
    V = np.asarray(V, dtype=complex)
    I = np.asarray(I, dtype=complex)
    Vc, Ic = _center(V), _center(I)
    G = Vc.conj().T @ Vc
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > 1e13:
        raise NumericalError(
            "voltage Gram matrix is singular; an unloaded bus makes its "
            "column a combination of its neighbors' (consider Kron-reducing "
            f"unloaded buses). cond ~ {cond:.2e}")
    Y = np.linalg.solve(G, Vc.conj().T @ Ic)
    return EstimationResult(y=real_stack(Y), Y=Y, method="ols",
                            diagnostics={"gram_cond": float(cond)})


def estimate_tls(V: np.ndarray, I: np.ndarray) -> EstimationResult:
    """Column-wise total least squares (deregularized closed form).

    Unbiased under noise on both voltages and currents with i.i.d. errors.
    """
    V = np.asarray(V, dtype=complex)
    I = np.asarray(I, dtype=complex)
    Vc, Ic = _center(V), _center(I)
    n = V.shape[1]
    G = Vc.conj().T @ Vc
    Y = np.zeros((n, n), dtype=complex)
    sigmas = np.zeros(n)
    for i in range(n):
        s = np.linalg.svd(np.column_stack([Vc, Ic[:, i]]), compute_uv=False)
        smin = s[-1]
        if s[-2] > 0 and (s[-2] - smin) / s[-2] < 1e-8:
            warnings.warn(f"column {i}: trailing singular values nearly equal; "
                          "TLS solution may be non-unique", stacklevel=2)
        sigmas[i] = smin
        Y[:, i] = np.linalg.solve(G - smin**2 * np.eye(n), Vc.conj().T @ Ic[:, i])
    return EstimationResult(y=real_stack(Y), Y=Y, method="tls",
                            diagnostics={"sigma_min": sigmas})


def ols_tls_covariance(V: np.ndarray, result: EstimationResult) -> np.ndarray:
    """Approximate per-column error covariances of an OLS/TLS estimate.

    Returns an (n, n, n) array: entry [i] is the covariance of column i.
    Uses sigma_min from the TLS singular analysis; for an OLS result the
    sigmas are computed on the fly.
    """
    V = np.asarray(V, dtype=complex)
    Vc = _center(V)
    N, n = V.shape
    Ginv = np.linalg.inv(Vc.conj().T @ Vc)
    sigmas = result.diagnostics.get("sigma_min")
    if sigmas is None:
        raise StructureError("result carries no singular-value diagnostics; "
                             "run estimate_tls or pass its sigmas")
    out = np.zeros((n, n, n), dtype=complex)
    for i in range(n):
        cov = sigmas[i]**2 / N * Ginv
        if result.method == "tls":
            cov = cov * (1.0 + np.linalg.norm(result.Y[:, i])**2)
        out[i] = cov
    return out


# ---------------------------------------------------------------------------
# Likelihood and Fisher information
# ---------------------------------------------------------------------------

def mle_negloglik(dv: np.ndarray, di: np.ndarray,
                  sigma_v: BlockCovariance, sigma_i: BlockCovariance) -> float:
    """Negative log-likelihood (up to constants) of stacked real noise vectors."""
    if dv.size != sigma_v.size or di.size != sigma_i.size:
        raise StructureError("noise vector length does not match covariance size")
    return sigma_i.quad_form(di) + sigma_v.quad_form(dv)


def fisher_mle(V: np.ndarray, Y: np.ndarray,
               sigma_v: BlockCovariance, sigma_i: BlockCovariance) -> np.ndarray:
    """Fisher information of the MLE, assembled column by column.

    Evaluated with exact voltages for theory use; with noisy data the result
    is only trustworthy at high signal-to-noise ratio. The matrix is block
    structured: parameters of different admittance columns never mix.
    """
    V = np.asarray(V, dtype=complex)
    Y = np.asarray(Y, dtype=complex)
    N, n = V.shape
    Vc = _center(V)
    P, Q = Vc.real, Vc.imag
    # per-sample outer products, shared by all columns
    PP = np.einsum("ta,tb->tab", P, P)
    PQ = np.einsum("ta,tb->tab", P, Q)
    QQ = np.einsum("ta,tb->tab", Q, Q)
    F = np.zeros((2 * n * n, 2 * n * n))
    for h in range(n):
        yr, yi = Y[:, h].real, Y[:, h].imag
        d_re = sigma_v.var_re @ yr**2      # (N,)
        d_reim = sigma_v.cov_reim @ (yr * yi)
        d_im = sigma_v.var_im @ yi**2
        blk = np.zeros((2 * n, 2 * n))
        for q_var in (sigma_i.var_re[:, h], sigma_i.var_im[:, h]):
            blk[:n, :n] += np.einsum("tab,t->ab", PP, 1.0 / (d_re + q_var))
            blk[:n, n:] += np.einsum("tab,t->ab", PQ, 1.0 / (d_reim + q_var))
            blk[n:, n:] += np.einsum("tab,t->ab", QQ, 1.0 / (d_im + q_var))
        blk[n:, :n] = blk[:n, n:].T
        sl_re = slice(h * n, (h + 1) * n)
        sl_im = slice(n * n + h * n, n * n + (h + 1) * n)
        F[sl_re, sl_re] = blk[:n, :n]
        F[sl_re, sl_im] = blk[:n, n:]
        F[sl_im, sl_re] = blk[n:, :n]
        F[sl_im, sl_im] = blk[n:, n:]
    return F


def fisher_column(F: np.ndarray, h: int, n: int) -> np.ndarray:
    """Extract the 2n x 2n Fisher block of admittance column h."""
    sl_re = slice(h * n, (h + 1) * n)
    sl_im = slice(n * n + h * n, n * n + (h + 1) * n)
    idx = np.r_[np.arange(*sl_re.indices(2 * n * n)),
                np.arange(*sl_im.indices(2 * n * n))]
    return F[np.ix_(idx, idx)]


def fisher_singularity_report(F: np.ndarray, n: int, tol: float = 1e-8) -> list:
    """Columns of the admittance matrix whose Fisher block is singular.

    A bus with no load makes its voltage column linearly dependent, which
    shows up here as a rank-deficient block.
    """
    bad = []
    for h in range(n):
        blk = fisher_column(F, h, n)
        w = np.linalg.eigvalsh(blk)
        if w.min() <= tol * max(w.max(), 1.0):
            bad.append(h)
    return bad


def fisher_map(F_mle: np.ndarray, priors: PriorStack, y_ref: np.ndarray,
               alpha: float) -> np.ndarray:
    """Fisher information with smoothed l1 priors added.

    Each prior contributes lam * L^T diag(1/(|L y_ref - mu| + alpha)) L.
    """
    if alpha <= 0:
        raise StructureError("alpha must be positive")
    F = np.array(F_mle, dtype=float)
    for term in priors:
        r = np.abs(term.residual(y_ref))
        W = sp.diags(1.0 / (r + alpha))
        F += term.lam * (term.L.T @ W @ term.L).toarray()
    return F
