"""Sparse kernels, flexible GMRES and block-diagonal preconditioners."""
from __future__ import annotations

import csv
import enum
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numba
import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "PreconditionerKind",
    "PreconditionerError",
    "SolverReport",
    "as_csr",
    "fgmres",
    "ilu0",
    "build_preconditioner",
    "build_block_preconditioner",
    "build_system_preconditioner",
    "BlockDiagonalPreconditioner",
    "PRECONDITIONER_NAMES",
    "pd_probe",
    "read_matrix_market",
    "write_matrix_market",
    "write_solver_csv",
]

log = logging.getLogger(__name__)


class PreconditionerError(RuntimeError):
    pass


class PreconditionerKind(enum.Enum):
    None_ = "none"
    Jacobi = "jacobi"
    SymGaussSeidel = "sgs"
    ILU0 = "ilu0"
    LU = "lu"


def as_csr(A) -> sp.csr_matrix:
    """CSR copy with sorted, unique column indices."""
    A = sp.csr_matrix(A, dtype=float, copy=True)
    A.sum_duplicates()
    A.sort_indices()
    return A


# -- numba kernels ---------------------------------------------------------------
@numba.njit(cache=True)
def _ilu0_factor(indptr, indices, data):
    n = len(indptr) - 1
    lu = data.copy()
    diag = np.empty(n, dtype=np.int64)
    pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        start, end = indptr[i], indptr[i + 1]
        for p in range(start, end):
            pos[indices[p]] = p
        diag[i] = -1
        for p in range(start, end):
            k = indices[p]
            if k >= i:
                if k == i:
                    diag[i] = p
                break
            piv = lu[diag[k]]
            lu[p] /= piv
            lik = lu[p]
            for q in range(diag[k] + 1, indptr[k + 1]):
                j = indices[q]
                r = pos[j]
                if r >= 0:
                    lu[r] -= lik * lu[q]
        for p in range(start, end):
            pos[indices[p]] = -1
        if diag[i] < 0 or lu[diag[i]] == 0.0:
            return lu, diag, i
    return lu, diag, -1


@numba.njit(cache=True)
def _ilu0_solve(indptr, indices, lu, diag, b):
    n = len(b)
    x = b.copy()
    for i in range(n):
        s = x[i]
        for p in range(indptr[i], diag[i]):
            s -= lu[p] * x[indices[p]]
        x[i] = s
    for i in range(n - 1, -1, -1):
        s = x[i]
        for p in range(diag[i] + 1, indptr[i + 1]):
            s -= lu[p] * x[indices[p]]
        x[i] = s / lu[diag[i]]
    return x


@numba.njit(cache=True)
def _sgs(indptr, indices, data, diag, b, sweeps):
    n = len(b)
    x = np.zeros(n)
    for _ in range(sweeps):
        for i in range(n):
            s = b[i]
            for p in range(indptr[i], indptr[i + 1]):
                if p != diag[i]:
                    s -= data[p] * x[indices[p]]
            x[i] = s / data[diag[i]]
        for i in range(n - 1, -1, -1):
            s = b[i]
            for p in range(indptr[i], indptr[i + 1]):
                if p != diag[i]:
                    s -= data[p] * x[indices[p]]
            x[i] = s / data[diag[i]]
    return x


def _diag_positions(A: sp.csr_matrix) -> np.ndarray:
    rows = np.repeat(np.arange(A.shape[0]), np.diff(A.indptr))
    pos = np.full(A.shape[0], -1, dtype=np.int64)
    hit = np.flatnonzero(A.indices == rows)
    pos[rows[hit]] = hit
    bad = np.flatnonzero((pos < 0) | (A.data[np.maximum(pos, 0)] == 0.0))
    if bad.size:
        raise PreconditionerError(f"zero diagonal entry in row {int(bad[0])}")
    return pos


# -- preconditioners -------------------------------------------------------------
class ILU0:
    """Incomplete LU factorization without fill (sparsity pattern of ``A``)."""

    def __init__(self, A):
        A = as_csr(A)
        _diag_positions(A)
        self.shape = A.shape
        self._indptr = A.indptr.astype(np.int64)
        self._indices = A.indices.astype(np.int64)
        lu, diag, bad = _ilu0_factor(self._indptr, self._indices, A.data.astype(float))
        if bad >= 0:
            raise PreconditionerError(f"zero pivot in ILU(0) at row {bad}")
        self._lu, self._diag = lu, diag

    def factors(self):
        """Dense ``(L, U)`` with unit-diagonal ``L``; meant for small checks."""
        M = sp.csr_matrix((self._lu, self._indices, self._indptr), shape=self.shape).toarray()
        L = np.tril(M, -1) + np.eye(self.shape[0])
        return L, np.triu(M)

    def __call__(self, b):
        return _ilu0_solve(self._indptr, self._indices, self._lu, self._diag, np.asarray(b, float))


def ilu0(A) -> ILU0:
    return ILU0(A)


class _Jacobi:
    def __init__(self, A):
        A = as_csr(A)
        pos = _diag_positions(A)
        self._inv = 1.0 / A.data[pos]

    def __call__(self, b):
        return self._inv * b


class _SymGaussSeidel:
    def __init__(self, A, sweeps=1):
        A = as_csr(A)
        self._pos = _diag_positions(A)
        self._A = A
        self.sweeps = int(sweeps)

    def __call__(self, b):
        A = self._A
        return _sgs(A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data, self._pos,
                    np.asarray(b, float), self.sweeps)


class _LU:
    def __init__(self, A):
        self._lu = spla.splu(sp.csc_matrix(A))

    def __call__(self, b):
        return self._lu.solve(np.asarray(b, float))


def _identity(b):
    return np.array(b, dtype=float, copy=True)


def build_preconditioner(A, kind="ilu0", sweeps: int = 1) -> Callable[[np.ndarray], np.ndarray]:
    """Single-block preconditioner ``b -> M^{-1} b`` for a square sparse matrix."""
    kind = PreconditionerKind(kind)
    if kind is PreconditionerKind.None_:
        return _identity
    if kind is PreconditionerKind.Jacobi:
        return _Jacobi(A)
    if kind is PreconditionerKind.SymGaussSeidel:
        return _SymGaussSeidel(A, sweeps)
    if kind is PreconditionerKind.ILU0:
        return ILU0(A)
    return _LU(A)


class BlockDiagonalPreconditioner:
    """Applies independent approximate inverses to the two diagonal blocks."""

    def __init__(self, split: int, first, second):
        self.split = split
        self.first = first
        self.second = second

    def __call__(self, r):
        r = np.asarray(r, float)
        return np.concatenate([self.first(r[: self.split]), self.second(r[self.split:])])


def build_block_preconditioner(system, kind="ilu0", sweeps: int = 1):
    """Block-diagonal preconditioner ``diag(K11, K22)^{-1}`` of a block system.

    ``kind="lu"`` solves both diagonal blocks exactly with a sparse LU.
    """
    kind = PreconditionerKind(kind)
    if kind is PreconditionerKind.None_:
        return _identity
    K11, _, _, K22 = system.blocks()
    try:
        first = build_preconditioner(K11, kind, sweeps)
    except PreconditionerError as exc:
        raise PreconditionerError(f"state block: {exc}") from None
    try:
        second = build_preconditioner(K22, kind, sweeps)
    except PreconditionerError as exc:
        raise PreconditionerError(f"adjoint block: {exc}") from None
    return BlockDiagonalPreconditioner(system.n_state, first, second)


def build_system_preconditioner(system, name: str = "ilu0", sweeps: int = 1):
    """Preconditioner from a name: a block-diagonal kind or ``coupled-<kind>``.

    The coupled variants factor the whole matrix, which pays off when the
    off-diagonal blocks dominate (small regularization parameter).
    """
    if name.startswith("coupled-"):
        kind = PreconditionerKind(name[len("coupled-"):])
        return build_preconditioner(system.matrix, kind, sweeps)
    return build_block_preconditioner(system, name, sweeps)


PRECONDITIONER_NAMES = tuple(k.value for k in PreconditionerKind) + tuple(
    f"coupled-{k.value}" for k in PreconditionerKind if k is not PreconditionerKind.None_
)


# -- flexible GMRES ------------------------------------------------------------
@dataclass
class SolverReport:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False
    restarts: int = 0

    @property
    def relative_residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")


def fgmres(A, b, M=None, rtol: float = 1e-8, restart: int = 50, maxit: int | None = None, x0=None):
    """Right-preconditioned flexible GMRES(restart).

    ``M`` is any callable ``r -> z`` and may change from one call to the
    next.  Returns ``(x, SolverReport)``; relative residuals are measured
    against ``||b||`` and the last history entry is the true residual.
    Non-convergence is reported through ``report.converged``.
    """
    if not 0 < rtol < 1:
        raise ValueError("rtol must lie in (0, 1)")
    if restart < 1:
        raise ValueError("restart must be at least 1")
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    maxit = 10 * restart if maxit is None else int(maxit)
    M = M or _identity
    b = np.asarray(b, float)
    matvec = (lambda v: A @ v) if not callable(A) else A
    t0 = time.perf_counter()
    report = SolverReport()

    x = np.zeros(n) if x0 is None else np.array(x0, float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        report.residuals.append(0.0)
        report.converged = True
        report.wall_time = time.perf_counter() - t0
        return np.zeros(n), report
    r = b - matvec(x)
    beta = np.linalg.norm(r)
    report.residuals.append(beta / bnorm)
    target = rtol * bnorm
    best_x, best_res = x.copy(), beta

    while beta > target and report.iterations < maxit:
        m = min(restart, maxit - report.iterations)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        j_used = 0
        for j in range(m):
            Z[j] = M(V[j])
            w = matvec(Z[j])
            # two passes of classical Gram-Schmidt
            h = V[: j + 1] @ w
            w = w - h @ V[: j + 1]
            h2 = V[: j + 1] @ w
            w = w - h2 @ V[: j + 1]
            H[: j + 1, j] = h + h2
            H[j + 1, j] = np.linalg.norm(w)
            for i in range(j):
                tmp = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = tmp
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                j_used = j
                break
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            report.iterations += 1
            j_used = j + 1
            report.residuals.append(abs(g[j + 1]) / bnorm)
            breakdown = np.linalg.norm(w) <= 1e-14 * max(beta, 1e-300)
            if abs(g[j + 1]) <= target or breakdown:
                break
            V[j + 1] = w / np.linalg.norm(w)
        if j_used == 0:
            break
        y = _back_substitute(H[:j_used, :j_used], g[:j_used])
        x = x + y @ Z[:j_used]
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        report.residuals[-1] = beta / bnorm
        report.restarts += 1
        if beta < best_res:
            best_x, best_res = x.copy(), beta
        if beta <= target:
            break

    report.converged = bool(best_res <= target)
    report.wall_time = time.perf_counter() - t0
    if not report.converged:
        log.warning("fgmres did not converge: relres %.3e after %d iterations",
                    best_res / bnorm, report.iterations)
    return best_x, report


def _back_substitute(R, g):
    y = np.zeros(len(g))
    for i in range(len(g) - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:] @ y[i + 1:]) / R[i, i]
    return y


# -- positive definiteness probe -------------------------------------------------
def pd_probe(system, trials: int = 1000, rng=None, batch: int = 100) -> float:
    """Smallest ``x^T K x`` over random unit vectors ``x``."""
    if trials < 1:
        raise ValueError("trials must be positive")
    K = getattr(system, "matrix", system)
    K = sp.csr_matrix(K) if sp.issparse(K) else np.asarray(K, float)
    rng = np.random.default_rng(rng)
    n = K.shape[0]
    best = np.inf
    done = 0
    while done < trials:
        m = min(batch, trials - done)
        X = rng.standard_normal((n, m))
        X /= np.linalg.norm(X, axis=0)
        best = min(best, float(np.min(np.einsum("ij,ij->j", X, K @ X))))
        done += m
    return best


# -- I/O -----------------------------------------------------------------------
def write_matrix_market(path, A, comment: str = "") -> Path:
    """Write a sparse matrix (or dense vector as an ``n x 1`` array) in Matrix Market format."""
    path = Path(path)
    data = sp.coo_matrix(A) if sp.issparse(A) else np.atleast_2d(np.asarray(A, float)).T
    with path.open("wb") as fh:
        scipy.io.mmwrite(fh, data, comment=comment)
    return path


def read_matrix_market(path) -> sp.csr_matrix:
    A = scipy.io.mmread(str(path))
    return as_csr(A) if sp.issparse(A) else np.asarray(A)


def write_solver_csv(path, report: SolverReport) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "relres"])
        for i, r in enumerate(report.residuals):
            w.writerow([i, f"{r:.16e}"])
    return path
