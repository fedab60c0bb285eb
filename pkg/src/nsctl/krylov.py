"""Sparse kernels: CSR construction, direct LU solves, Chebyshev semi-iteration
for mass matrices, and restarted (flexible) GMRES with right preconditioning.

GMRES is hand-rolled because the benchmark reports iteration counts: we need a
fixed-iteration mode (an exact number of inner steps, no tolerance exit), a
flexible variant, explicit restart semantics and true-residual reporting.
"""

import logging
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger("nsctl.krylov")

_REORTH_TOL = 1e-8


class SingularMatrixError(Exception):
    """Raised when LU factorization meets a structurally or numerically singular matrix."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


def from_triplets(rows, cols, vals, shape) -> sp.csr_matrix:
    """Assemble a CSR matrix from COO triplets; duplicates are summed."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if rows.size and (rows.min() < 0 or rows.max() >= shape[0]
                      or cols.min() < 0 or cols.max() >= shape[1]):
        raise ValueError("triplet index out of bounds for shape %r" % (shape,))
    a = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    a.sum_duplicates()
    a.sort_indices()
    return a


class Factorization:
    """Sparse LU (SuperLU with COLAMD fill-reducing ordering) behind a solve() facade."""

    def __init__(self, lu, ordering: str):
        self._lu = lu
        self.ordering = ordering

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=np.float64))


def factorize(a: sp.spmatrix) -> Factorization:
    """LU-factorize a square sparse matrix; singularity raises SingularMatrixError."""
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    try:
        lu = spla.splu(a.tocsc())
    except RuntimeError as exc:
        m = re.search(r"\d+", str(exc))
        pivot = int(m.group()) if m else None
        raise SingularMatrixError(f"singular matrix: {exc}", pivot=pivot) from exc
    # SuperLU happily factorizes singular matrices, leaving zero (or
    # roundoff-sized) pivots behind instead of raising; reject those too.
    # The relative threshold separates rank deficiency (pivot ratio at
    # machine-epsilon level, e.g. a pure-Neumann stiffness matrix) from the
    # merely ill-conditioned blocks this solver legitimately factorizes.
    u_diag = np.abs(lu.U.diagonal())
    bad = np.flatnonzero(u_diag <= 1e-12 * u_diag.max(initial=0.0))
    if bad.size:
        raise SingularMatrixError(f"singular matrix: zero pivot at {bad[0]}",
                                  pivot=int(bad[0]))
    return Factorization(lu, ordering="COLAMD")


@dataclass
class ChebyshevMassSolver:
    """Fixed-step Chebyshev semi-iteration for an SPD mass matrix with Jacobi splitting.

    The eigenvalue interval brackets spec(D^-1 M); on a uniform grid the
    Jacobi-scaled reference-element eigenvalues bound the global spectrum.
    """

    matrix: sp.csr_matrix
    interval: tuple
    steps: int = 20
    diag: np.ndarray = field(default=None)

    def __post_init__(self):
        lmin, lmax = self.interval
        if lmin <= 0.0:
            raise ValueError(f"Chebyshev interval must be positive, got [{lmin}, {lmax}]")
        if lmax < lmin:
            raise ValueError(f"empty Chebyshev interval [{lmin}, {lmax}]")
        if self.diag is None:
            self.diag = self.matrix.diagonal().copy()
        if np.any(self.diag <= 0.0):
            raise ValueError("mass matrix diagonal must be positive")


def chebyshev_solve(solver: ChebyshevMassSolver, b: np.ndarray) -> np.ndarray:
    """Run the fixed number of Chebyshev steps on M x = b (inner-product free)."""
    lmin, lmax = solver.interval
    theta = 0.5 * (lmax + lmin)
    delta = 0.5 * (lmax - lmin)
    m, dinv = solver.matrix, 1.0 / solver.diag

    x = np.zeros_like(b, dtype=np.float64)
    r = dinv * b                       # preconditioned residual at x = 0
    if delta == 0.0:                   # exact Jacobi case, e.g. M = I
        return r / theta
    sigma1 = theta / delta
    rho = 1.0 / sigma1
    d = r / theta
    for _ in range(solver.steps):
        x = x + d
        r = r - dinv * (m @ d)
        rho_next = 1.0 / (2.0 * sigma1 - rho)
        d = rho_next * rho * d + (2.0 * rho_next / delta) * r
        rho = rho_next
    return x


@dataclass
class KrylovConfig:
    restart: int = 10
    rtol: float = 1e-6
    atol: float = 0.0
    maxiter: int = 200
    flexible: bool = False
    fixed_iters: int = None            # exactly this many steps, no tolerance exit

    def __post_init__(self):
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.rtol <= 0.0 and self.fixed_iters is None:
            raise ValueError("rtol must be positive")


@dataclass
class SolveStats:
    iters: int = 0
    residuals: list = field(default_factory=list)
    converged: bool = False
    breakdown: bool = False
    true_residual: float = 0.0


def _as_operator(op):
    if op is None:
        return lambda x: x
    if callable(op):
        return op
    return lambda x, _m=op: _m @ x


def _gmres_cycle(apply_a, apply_p, b, x0, steps, target, collect, flexible):
    """One Arnoldi cycle of right-preconditioned GMRES; returns (x, met, breakdown)."""
    n = b.shape[0]
    r0 = b - apply_a(x0)
    beta = np.linalg.norm(r0)
    if beta == 0.0:
        return x0, True, False

    v = np.zeros((steps + 1, n))
    z = np.zeros((steps, n))
    h = np.zeros((steps + 1, steps))
    cs = np.zeros(steps)
    sn = np.zeros(steps)
    g = np.zeros(steps + 1)
    v[0] = r0 / beta
    g[0] = beta

    j_done = 0
    breakdown = False
    met = False
    for j in range(steps):
        zj = apply_p(v[j])
        # copy: orthogonalization below edits w in place, and an operator is
        # allowed to return its argument (e.g. an identity preconditioner)
        w = np.array(apply_a(zj), dtype=np.float64)
        z[j] = zj

        norm_before = np.linalg.norm(w)
        for i in range(j + 1):
            h[i, j] = v[i] @ w
            w -= h[i, j] * v[i]
        # one reorthogonalization pass when MGS left visible coupling behind
        if norm_before > 0.0:
            loss = np.abs(v[:j + 1] @ w).max(initial=0.0)
            if loss > _REORTH_TOL * norm_before:
                for i in range(j + 1):
                    corr = v[i] @ w
                    h[i, j] += corr
                    w -= corr * v[i]
        hj1 = np.linalg.norm(w)
        h[j + 1, j] = hj1
        happy = hj1 <= 1e-14 * max(norm_before, 1e-300)
        if not happy:
            v[j + 1] = w / hj1

        for i in range(j):
            t = cs[i] * h[i, j] + sn[i] * h[i + 1, j]
            h[i + 1, j] = -sn[i] * h[i, j] + cs[i] * h[i + 1, j]
            h[i, j] = t
        denom = np.hypot(h[j, j], h[j + 1, j])
        if denom == 0.0:                 # column gives no progress; drop it
            breakdown = True
            break
        cs[j], sn[j] = h[j, j] / denom, h[j + 1, j] / denom
        h[j, j] = denom
        h[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]

        j_done = j + 1
        collect(abs(g[j + 1]))

        if happy:
            breakdown = True
            met = target is None or abs(g[j + 1]) <= target
            break
        if target is not None and abs(g[j + 1]) <= target:
            met = True
            break

    if j_done == 0:
        return x0, False, breakdown
    y = np.zeros(j_done)
    for i in range(j_done - 1, -1, -1):
        y[i] = (g[i] - h[i, i + 1:j_done] @ y[i + 1:j_done]) / h[i, i]
    if flexible:
        dx = z[:j_done].T @ y
    else:
        dx = apply_p(v[:j_done].T @ y)
    return x0 + dx, met, breakdown


def _gmres_common(apply_a, apply_p, b, cfg: KrylovConfig, flexible: bool):
    apply_a = _as_operator(apply_a)
    apply_p = _as_operator(apply_p)
    b = np.asarray(b, dtype=np.float64)
    stats = SolveStats()

    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        stats.converged = True
        return np.zeros_like(b), stats

    fixed = cfg.fixed_iters
    if fixed is not None:
        x, _, breakdown = _run_fixed(apply_a, apply_p, b, fixed, stats, flexible)
        stats.breakdown = breakdown
        stats.true_residual = np.linalg.norm(b - apply_a(x))
        stats.converged = True
        return x, stats

    target = max(cfg.rtol * norm_b, cfg.atol)
    x = np.zeros_like(b)
    while stats.iters < cfg.maxiter:
        steps = min(cfg.restart, cfg.maxiter - stats.iters)
        before = len(stats.residuals)

        def collect(res):
            stats.residuals.append(res)
            stats.iters += 1

        x, met, breakdown = _gmres_cycle(apply_a, apply_p, b, x, steps, target,
                                         collect, flexible)
        stats.breakdown = stats.breakdown or breakdown
        true_res = np.linalg.norm(b - apply_a(x))
        if met or true_res <= target:
            stats.converged = True
            break
        if breakdown:
            break
        if len(stats.residuals) == before:   # no progress possible
            break
    stats.true_residual = np.linalg.norm(b - apply_a(x))
    if stats.true_residual <= target:
        stats.converged = True
    return x, stats


def _run_fixed(apply_a, apply_p, b, k, stats, flexible):
    def collect(res):
        stats.residuals.append(res)
        stats.iters += 1

    return _gmres_cycle(apply_a, apply_p, b, np.zeros_like(b), k, None, collect, flexible)


def gmres(apply_a, apply_p, b, cfg: KrylovConfig):
    """Right-preconditioned restarted GMRES with a fixed linear preconditioner.

    With cfg.fixed_iters set, runs exactly that many Arnoldi steps (no
    tolerance exit) -- the mode used for the inner momentum solver.
    """
    return _gmres_common(apply_a, apply_p, b, cfg, flexible=False)


def fgmres(apply_a, apply_p_varying, b, cfg: KrylovConfig):
    """Flexible GMRES: the preconditioner may change between iterations."""
    return _gmres_common(apply_a, apply_p_varying, b, cfg, flexible=True)
