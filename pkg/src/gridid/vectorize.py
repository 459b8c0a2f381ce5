"""Real vectorization of complex matrix quantities and parameter reduction.

Conventions, fixed once and used everywhere:

* ``vec`` stacks matrix columns (column-major), so for data matrices with one
  column per bus the flattened order is bus-major: entry ``h*N + t``.
* Real stacking is ``[Re(vec(.)); Im(vec(.))]``.
* ``ve`` scans the strictly sub-diagonal entries of the negated matrix in
  column-major order; applied to an admittance matrix it returns the line
  admittances themselves.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import StructureError


def vec(M: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(M).ravel(order="F")


def unvec(x: np.ndarray, rows: int) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape((rows, x.size // rows), order="F")


def real_stack(M: np.ndarray) -> np.ndarray:
    """[Re(vec(M)); Im(vec(M))] as one real vector."""
    z = vec(np.asarray(M, dtype=complex))
    return np.concatenate([z.real, z.imag])


def complex_unstack(x: np.ndarray, rows: int) -> np.ndarray:
    """Inverse of real_stack."""
    x = np.asarray(x, dtype=float)
    half = x.size // 2
    return unvec(x[:half] + 1j * x[half:], rows)


class VBlock:
    """The structured real regressor representing Y -> vec(V Y).

    Acts like the 2nN-by-2n^2 matrix of the real-vectorized linear model
    without ever materializing the Kronecker product.
    """

    def __init__(self, V: np.ndarray):
        self.V = np.asarray(V, dtype=complex)
        self.N, self.n = self.V.shape

    @property
    def shape(self):
        return (2 * self.n * self.N, 2 * self.n * self.n)

    def matvec(self, y_stack: np.ndarray) -> np.ndarray:
        """Product with a stacked parameter vector: returns stacked vec(V Y)."""
        Y = complex_unstack(y_stack, self.n)
        return real_stack(self.V @ Y)

    def to_dense(self) -> np.ndarray:
        """Dense materialization, for small-n checks only."""
        K = np.kron(np.eye(self.n), self.V)
        return np.block([[K.real, -K.imag], [K.imag, K.real]])


@dataclass
class RealStack:
    """Real-vectorized view of a (V, I, Y) triple."""

    v_stack: np.ndarray
    i_stack: np.ndarray
    y_stack: np.ndarray
    V_block: VBlock


def realify(V: np.ndarray, I: np.ndarray, Y: np.ndarray) -> RealStack:
    """Convert complex data matrices and parameters to the real stacked form."""
    V = np.asarray(V, dtype=complex)
    I = np.asarray(I, dtype=complex)
    Y = np.asarray(Y, dtype=complex)
    if V.shape != I.shape or Y.shape != (V.shape[1], V.shape[1]):
        raise StructureError("inconsistent dimensions in realify")
    return RealStack(real_stack(V), real_stack(I), real_stack(Y), VBlock(V))


def sub_diagonal_pairs(n: int) -> list:
    """(row, col) pairs of the strict lower triangle in column-major order."""
    return [(i, j) for j in range(n) for i in range(j + 1, n)]


def ve(M: np.ndarray) -> np.ndarray:
    """Strictly sub-diagonal entries of -M, column-major scan."""
    M = np.asarray(M)
    return np.array([-M[i, j] for i, j in sub_diagonal_pairs(M.shape[0])])


@dataclass
class ReductionMap:
    """Parameterization of symmetric Laplacian matrices by their line admittances.

    The reduced vector y_r = [Re(ve(Y)); Im(ve(Y))] holds one complex entry per
    retained bus pair. Expansion reproduces a symmetric matrix with zero row
    sums and zeros at the excluded pairs.
    """

    n: int
    pairs: list  # retained (row, col) pairs, row > col, column-major order
    expand_complex: sp.csr_matrix = field(repr=False)  # n^2 x r, vec(Y) = E @ ve-params
    reduce_complex: sp.csr_matrix = field(repr=False)  # r x n^2, left inverse of E

    @property
    def r(self) -> int:
        """Number of retained complex parameters."""
        return len(self.pairs)

    @property
    def dim(self) -> int:
        """Length of the real reduced vector."""
        return 2 * self.r

    def expand(self, y_r: np.ndarray) -> np.ndarray:
        """Real reduced vector -> full real stacked vector (length 2n^2)."""
        y_r = np.asarray(y_r, dtype=float)
        re, im = y_r[:self.r], y_r[self.r:]
        return np.concatenate([self.expand_complex @ re, self.expand_complex @ im])

    def reduce(self, y: np.ndarray, warn_tol: float = 1e-9) -> np.ndarray:
        """Full real stacked vector -> reduced vector.

        Non-symmetric input is projected by averaging Y and its transpose.
        """
        y = np.asarray(y, dtype=float)
        n2 = self.n * self.n
        Y = complex_unstack(y, self.n)
        asym = np.abs(Y - Y.T).max() if Y.size else 0.0
        if asym > warn_tol * max(1.0, np.abs(Y).max()):
            warnings.warn("reducing a non-symmetric matrix; projecting onto "
                          "its symmetric part", stacklevel=2)
        re = self.reduce_complex @ y[:n2]
        im = self.reduce_complex @ y[n2:]
        return np.concatenate([re, im])

    def expand_matrix_real(self) -> sp.csr_matrix:
        """The sparse 2n^2-by-2r expansion map (I_2 kron of the complex one)."""
        return sp.block_diag([self.expand_complex, self.expand_complex]).tocsr()

    def expand_admittance(self, y_r: np.ndarray) -> np.ndarray:
        """Reduced vector -> complex admittance matrix."""
        return complex_unstack(self.expand(y_r), self.n)

    def reduce_admittance(self, Y: np.ndarray) -> np.ndarray:
        """Complex admittance matrix -> reduced real vector."""
        return self.reduce(real_stack(Y))

    def pair_index(self, h: int, k: int) -> int:
        """Index of the complex parameter for bus pair (h, k)."""
        i, j = max(h, k), min(h, k)
        return self.pairs.index((i, j))

    def save_triplets(self, path) -> None:
        E = self.expand_complex.tocoo()
        with open(path, "w") as f:
            f.write(f"# dim {E.shape[0]} {E.shape[1]}\n")
            for r, c, v in zip(E.row, E.col, E.data):
                f.write(f"{r} {c} {v!r} 0.0\n")


def build_reduction(n: int, zero_pattern=None) -> ReductionMap:
    """Build the symmetric-Laplacian parameter reduction for an n-bus grid.

    :param zero_pattern: optional iterable of off-diagonal (h, k) pairs known
        to carry no line; the corresponding parameters are dropped.
    """
    zeros = set()
    for h, k in (zero_pattern or []):
        if h == k:
            raise StructureError("zero_pattern may only contain off-diagonal pairs")
        zeros.add((max(h, k), min(h, k)))
    pairs = [p for p in sub_diagonal_pairs(n) if p not in zeros]
    present = np.zeros(n, dtype=bool)
    for i, j in pairs:
        present[i] = present[j] = True
    if not present.all() and n > 1:
        missing = np.flatnonzero(~present)
        warnings.warn(f"zero_pattern leaves bus(es) {missing.tolist()} with no "
                      "free parameter; their row is fixed to zero", stacklevel=2)

    rows, cols, vals = [], [], []
    rrows, rcols, rvals = [], [], []
    for l, (i, j) in enumerate(pairs):
        # one line admittance touches 4 matrix entries: both off-diagonal
        # mirrors (negated) and both incident diagonals
        for rr, vv in (((j * n + i), -1.0), ((i * n + j), -1.0),
                       ((i * n + i), 1.0), ((j * n + j), 1.0)):
            rows.append(rr)
            cols.append(l)
            vals.append(vv)
        rrows += [l, l]
        rcols += [j * n + i, i * n + j]
        rvals += [-0.5, -0.5]
    E = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, len(pairs)))
    R = sp.csr_matrix((rvals, (rrows, rcols)), shape=(len(pairs), n * n))
    return ReductionMap(n=n, pairs=pairs, expand_complex=E, reduce_complex=R)


def expand_params(rmap: ReductionMap, y_r: np.ndarray) -> np.ndarray:
    return rmap.expand(y_r)


def reduce_params(rmap: ReductionMap, y: np.ndarray) -> np.ndarray:
    return rmap.reduce(y)
