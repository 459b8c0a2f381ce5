"""Network topology, admittance matrix construction, and Kron reduction.

All electrical quantities are in per-unit. An admittance matrix built from a
topology without shunt elements is a complex Laplacian: symmetric, with zero
row sums.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, StructureError


@dataclass(frozen=True)
class LineSpec:
    """A single power line between two buses, y = g + jb."""

    from_bus: int
    to_bus: int
    g: float
    b: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise StructureError(f"line connects bus {self.from_bus} to itself")
        if self.g < 0:
            raise StructureError(f"negative conductance {self.g} on line "
                                 f"({self.from_bus}, {self.to_bus})")

    @property
    def admittance(self) -> complex:
        return complex(self.g, self.b)


@dataclass
class GridTopology:
    """Buses, lines and shunts of a single-phase network.

    :param n: number of buses, indexed 0..n-1
    :param lines: list of LineSpec; parallel lines are allowed and merged at
        matrix-build time
    :param shunts: per-bus complex shunt admittance (default all zero)
    :param rated_voltage: nominal voltage in per-unit
    """

    n: int
    lines: list = field(default_factory=list)
    shunts: np.ndarray | None = None
    rated_voltage: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise StructureError("need at least one bus")
        if self.shunts is None:
            self.shunts = np.zeros(self.n, dtype=complex)
        else:
            self.shunts = np.asarray(self.shunts, dtype=complex)
            if self.shunts.shape != (self.n,):
                raise StructureError("shunt vector length must equal bus count")
        for ln in self.lines:
            if not (0 <= ln.from_bus < self.n and 0 <= ln.to_bus < self.n):
                raise StructureError(f"line ({ln.from_bus}, {ln.to_bus}) out of range")

    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        adj = [[] for _ in range(self.n)]
        for ln in self.lines:
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
        seen = np.zeros(self.n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            h = stack.pop()
            for k in adj[h]:
                if not seen[k]:
                    seen[k] = True
                    stack.append(k)
        return bool(seen.all())


@dataclass
class AdmittanceMatrix:
    """Dense complex admittance matrix with structure flags."""

    matrix: np.ndarray
    symmetric: bool = True
    laplacian: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise StructureError("admittance matrix must be square")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def copy(self) -> "AdmittanceMatrix":
        return AdmittanceMatrix(self.matrix.copy(), self.symmetric, self.laplacian)


@dataclass
class StructureReport:
    """Diagnostics from validate_structure."""

    symmetry_residual: float
    row_sum_residual: float
    sparsity: float
    tol: float

    @property
    def is_symmetric(self) -> bool:
        return self.symmetry_residual <= self.tol

    @property
    def is_laplacian(self) -> bool:
        return self.is_symmetric and self.row_sum_residual <= self.tol


def default_laplacian_tol(Y: np.ndarray) -> float:
    n = Y.shape[0]
    scale = np.abs(Y).max() if Y.size else 1.0
    return 1e-9 * n * max(scale, 1.0)


def build_admittance(topology: GridTopology) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix of a topology.

    Off-diagonal entries are the negated line admittances; diagonal entries
    are the sum of incident line admittances plus the bus shunt. Parallel
    lines between the same bus pair are merged by admittance addition.

    :raises StructureError: if the underlying graph is not connected.
    """
    if not topology.is_connected():
        raise StructureError("grid graph is not connected")
    n = topology.n
    Y = np.zeros((n, n), dtype=complex)
    for ln in topology.lines:
        y = ln.admittance
        h, k = ln.from_bus, ln.to_bus
        Y[h, k] -= y
        Y[k, h] -= y
        Y[h, h] += y
        Y[k, k] += y
    Y[np.diag_indices(n)] += topology.shunts
    laplacian = bool(np.allclose(topology.shunts, 0.0))
    return AdmittanceMatrix(Y, symmetric=True, laplacian=laplacian)


def kron_reduce(Y: AdmittanceMatrix, keep) -> AdmittanceMatrix:
    """Eliminate buses via the Schur complement (Kron reduction).

    For any exact state with zero current injection at the eliminated buses,
    the reduced matrix satisfies I_keep = Y_red V_keep.

    :param keep: iterable of bus indices to retain.
    :raises NumericalError: if the eliminated block is (nearly) singular.
    """
    keep = np.asarray(sorted(set(int(i) for i in keep)), dtype=int)
    if keep.size == 0:
        raise StructureError("keep set must be nonempty")
    if keep.min() < 0 or keep.max() >= Y.n:
        raise StructureError("keep indices out of range")
    elim = np.setdiff1d(np.arange(Y.n), keep)
    M = Y.matrix
    if elim.size == 0:
        return Y.copy()
    Yee = M[np.ix_(elim, elim)]
    cond = np.linalg.cond(Yee)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"eliminated block is ill-conditioned (cond ~ {cond:.2e})")
    Ykk = M[np.ix_(keep, keep)]
    Yke = M[np.ix_(keep, elim)]
    Yek = M[np.ix_(elim, keep)]
    red = Ykk - Yke @ np.linalg.solve(Yee, Yek)
    report = validate_structure(AdmittanceMatrix(red))
    return AdmittanceMatrix(red, symmetric=Y.symmetric,
                            laplacian=Y.laplacian and report.is_laplacian)


def validate_structure(Y: AdmittanceMatrix, tol: float | None = None) -> StructureReport:
    """Report symmetry and Laplacian residuals plus the off-diagonal sparsity."""
    M = Y.matrix
    if tol is None:
        tol = default_laplacian_tol(M)
    sym = float(np.abs(M - M.T).max()) if M.size else 0.0
    row = float(np.abs(M.sum(axis=1)).max()) if M.size else 0.0
    n = M.shape[0]
    off = ~np.eye(n, dtype=bool)
    n_off = off.sum()
    sparsity = float((np.abs(M[off]) <= tol).sum() / n_off) if n_off else 0.0
    return StructureReport(symmetry_residual=sym, row_sum_residual=row,
                           sparsity=sparsity, tol=tol)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_grid(topology: GridTopology, path) -> None:
    """Write a grid fixture file.

    Line-oriented text: `n`, `rated_voltage`, one `line from to g b` per line,
    one `shunt node g b` per nonzero shunt. Round-trips with :func:`load_grid`.
    """
    with open(path, "w") as f:
        f.write(f"n {topology.n}\n")
        f.write(f"rated_voltage {topology.rated_voltage!r}\n")
        for ln in topology.lines:
            f.write(f"line {ln.from_bus} {ln.to_bus} "
                    f"{float(ln.g)!r} {float(ln.b)!r}\n")
        for h, ys in enumerate(topology.shunts):
            if ys != 0:
                f.write(f"shunt {h} {float(ys.real)!r} {float(ys.imag)!r}\n")


def load_grid(path) -> GridTopology:
    """Parse a grid fixture file written by :func:`save_grid`."""
    n = None
    rated = 1.0
    lines = []
    shunt_entries = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            raw = raw.split("#", 1)[0].strip()
            if not raw:
                continue
            parts = raw.split()
            try:
                if parts[0] == "n":
                    n = int(parts[1])
                elif parts[0] == "rated_voltage":
                    rated = float(parts[1])
                elif parts[0] == "line":
                    lines.append(LineSpec(int(parts[1]), int(parts[2]),
                                          float(parts[3]), float(parts[4])))
                elif parts[0] == "shunt":
                    shunt_entries.append((int(parts[1]),
                                          complex(float(parts[2]), float(parts[3]))))
                else:
                    raise StructureError(f"{path}:{lineno}: unknown record {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise StructureError(f"{path}:{lineno}: malformed record") from exc
    if n is None:
        raise StructureError(f"{path}: missing bus count record")
    shunts = np.zeros(n, dtype=complex)
    for h, ys in shunt_entries:
        shunts[h] = ys
    return GridTopology(n=n, lines=lines, shunts=shunts, rated_voltage=rated)


def save_matrix_triplets(M: np.ndarray, path, tol: float = 0.0) -> None:
    """Export a complex matrix as `row col re im` text triplets.

    Entries with magnitude <= tol are omitted. The matrix dimension is stored
    in a header comment so zero rows/columns survive the round trip.
    """
    M = np.asarray(M, dtype=complex)
    with open(path, "w") as f:
        f.write(f"# dim {M.shape[0]} {M.shape[1]}\n")
        for r in range(M.shape[0]):
            for c in range(M.shape[1]):
                z = M[r, c]
                if abs(z) > tol:
                    f.write(f"{r} {c} {float(z.real)!r} {float(z.imag)!r}\n")


def load_matrix_triplets(path) -> np.ndarray:
    with open(path) as f:
        first = f.readline()
        parts = first.split()
        if len(parts) != 4 or parts[0] != "#" or parts[1] != "dim":
            raise StructureError(f"{path}: missing dimension header")
        rows, cols = int(parts[2]), int(parts[3])
        M = np.zeros((rows, cols), dtype=complex)
        for raw in f:
            raw = raw.split("#", 1)[0].strip()
            if not raw:
                continue
            r, c, re, im = raw.split()
            M[int(r), int(c)] = complex(float(re), float(im))
    return M


def save_matrix_csv(M: np.ndarray, path) -> None:
    """Dense CSV alternative: one row per matrix row, cells `re+imj`."""
    M = np.asarray(M, dtype=complex)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for r in range(M.shape[0]):
            w.writerow([f"{float(z.real)!r}{float(z.imag):+}j" for z in M[r]])


def load_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.reader(f):
            rows.append([complex(cell) for cell in rec])
    return np.asarray(rows, dtype=complex)
