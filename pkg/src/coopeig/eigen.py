"""Principal (Perron) eigenpair of a discrete Metzler operator with a certified bracket.

Sign convention: ``A psi = -lambda psi``, so ``lambda`` is minus the rightmost
eigenvalue ``nu`` of ``A`` and is positive for the Dirichlet Laplacian.

The bracket comes from Collatz-Wielandt quotients: for any positive ``v`` the
rightmost eigenvalue of an irreducible Metzler matrix satisfies
``min_r (Av)_r / v_r <= nu <= max_r (Av)_r / v_r``. Quotients are evaluated in
extended precision so the bracket is not polluted by cancellation in ``Av``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .discretize import DiscreteOperator, Grid
from .errors import MaxIterExceeded, MetzlerRequired, NotIrreducible, RegionError

log = logging.getLogger(__name__)


@dataclass
class EigenPair:
    lam: float
    psi: np.ndarray  # full grid function (N, n_nodes), zero off the interior
    bracket: tuple  # (lambda_lo, lambda_hi)
    iterations: int
    normalization_node: int
    converged: bool
    grid: Grid
    tol: float

    @property
    def width(self) -> float:
        return self.bracket[1] - self.bracket[0]

    @property
    def psi_rows(self) -> np.ndarray:
        return self.grid.to_rows(self.psi)


def cw_quotients(A: sp.csr_matrix, v: np.ndarray) -> np.ndarray:
    """``(A v)_r / v_r`` in extended precision."""
    data = A.data.astype(np.longdouble)
    vv = v.astype(np.longdouble)
    prod = data * vv[A.indices]
    starts = A.indptr[:-1]
    sums = np.add.reduceat(prod, starts) if len(prod) else np.zeros(A.shape[0], np.longdouble)
    sums[np.diff(A.indptr) == 0] = 0
    return sums / vv


def cw_bracket(A: sp.csr_matrix, v: np.ndarray) -> tuple[float, float]:
    q = cw_quotients(A, v)
    return float(q.min()), float(q.max())


def is_irreducible(A: sp.csr_matrix) -> bool:
    off = A.copy().tocsr()
    off.setdiag(0)
    off.eliminate_zeros()
    off.data = (off.data > 0).astype(float)
    off.eliminate_zeros()
    n_comp, _ = connected_components(off, directed=True, connection="strong")
    return n_comp == 1


def normalization_node(grid: Grid) -> int:
    """Node nearest the origin among nodes interior for some regime."""
    any_interior = grid.interior.any(axis=0)
    cand = np.flatnonzero(any_interior)
    d = np.sum(grid.coords[cand] ** 2, axis=1)
    best = cand[np.argmin(d)]
    if np.sqrt(d.min()) > np.sqrt(grid.dim) * max(grid.h) + 1e-12:
        raise RegionError("origin is outside the domain; cannot normalize",
                          where="eigen.principal_eigenpair")
    return int(best)


def normalize(psi: np.ndarray, grid: Grid, node: int) -> np.ndarray:
    vals = psi[:, node][grid.interior[:, node]]
    return psi / vals.min()


def default_tol(lam: float, rtol: float = 1e-10) -> float:
    return rtol * (1.0 + abs(lam))


def principal_eigenpair(op: DiscreteOperator, tol: float | None = None, max_iter: int = 100_000,
                        start: np.ndarray | None = None, check_irreducible: bool = True,
                        rtol: float = 1e-10) -> EigenPair:
    """Perron eigenpair by shifted inverse iteration with Collatz-Wielandt certification.

    ``tol=None`` uses ``rtol * (1 + |lambda|)``, re-evaluated as the estimate
    improves. The shift ``sigma`` always sits at or above the current certified
    upper bound for ``nu`` so ``(sigma I - A)^{-1}`` is entrywise positive and
    the iterate stays positive.
    """
    if not op.metzler_ok:
        raise MetzlerRequired("operator has negative off-diagonal entries")
    A = op.A
    n = A.shape[0]
    if check_irreducible and not is_irreducible(A):
        raise NotIrreducible("block graph of the discrete operator is not strongly connected")
    I = sp.identity(n, format="csc")
    v = np.ones(n) if start is None else np.asarray(start, dtype=float).copy()
    if np.any(v <= 0):
        raise ValueError("start vector must be positive")
    v /= v.max()
    lo, hi = cw_bracket(A, v)
    best_lo, best_hi = lo, hi
    floor = 1e-13 * op.s0

    def factor(sig):
        while True:
            try:
                return spla.splu((sig * I - A).tocsc()), sig
            except RuntimeError:
                sig += max(10 * floor, 1e-3 * (best_hi - best_lo))

    lu, sigma = factor(best_hi + max(best_hi - best_lo, floor))
    width_at_factor = best_hi - best_lo
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        y = lu.solve(v)
        if not np.all(y > 0):
            # positivity can only fail through rounding when sigma hugs nu
            lu, sigma = factor(sigma + max(best_hi - best_lo, 10 * floor))
            continue
        y /= y.max()
        lo, hi = cw_bracket(A, y)
        v = y
        if lo <= best_hi and hi >= best_lo:
            best_lo, best_hi = max(best_lo, lo), min(best_hi, hi)
        elif hi - lo < best_hi - best_lo:
            best_lo, best_hi = lo, hi
        lam = -(best_lo + best_hi) / 2
        t = default_tol(lam, rtol) if tol is None else tol
        if best_hi - best_lo <= t:
            converged = True
            break
        if best_hi - best_lo <= 0.5 * width_at_factor:
            width_at_factor = best_hi - best_lo
            lu, sigma = factor(best_hi + max(best_hi - best_lo, floor))
    lam = -(best_lo + best_hi) / 2
    t = default_tol(lam, rtol) if tol is None else tol
    grid = op.grid
    node = normalization_node(grid)
    psi = normalize(grid.from_rows(v), grid, node)
    pair = EigenPair(lam, psi, (-best_hi, -best_lo), it, node, converged, grid, t)
    if not converged:
        raise MaxIterExceeded(
            f"bracket width {best_hi - best_lo:.3e} > tol {t:.3e} after {it} iterations", partial=pair)
    return pair


@dataclass
class UniquenessReport:
    trials: int
    max_deviation: float
    passed: bool


def uniqueness_probe(op: DiscreteOperator, pair: EigenPair, trials: int = 5, seed: int = 0,
                     threshold: float = 1e-6) -> UniquenessReport:
    """Restart from random positive vectors and compare the normalized eigenvectors."""
    rng = np.random.default_rng(seed)
    ref = pair.psi
    scale = np.max(np.abs(ref))
    worst = 0.0
    for _ in range(trials):
        start = rng.uniform(0.1, 1.0, op.n)
        other = principal_eigenpair(op, tol=pair.tol, start=start, check_irreducible=False)
        worst = max(worst, float(np.max(np.abs(other.psi - ref)) / scale))
    return UniquenessReport(trials, worst, worst <= threshold)


def dense_principal(op: DiscreteOperator) -> tuple[float, float]:
    """Dense oracle: ``(lambda, error_bound)`` from a full eigen-decomposition.

    The bound is ``10 * eps * ||A||_2 * kappa`` with ``kappa`` the eigenvalue
    condition number from left and right eigenvectors.
    """
    import scipy.linalg as sla

    M = op.A.toarray()
    w, vl, vr = sla.eig(M, left=True, right=True)
    i = int(np.argmax(w.real))
    l, r = vl[:, i], vr[:, i]
    kappa = np.linalg.norm(l) * np.linalg.norm(r) / abs(np.vdot(l, r))
    err = 10 * np.finfo(float).eps * np.linalg.norm(M, 2) * kappa
    return float(-w[i].real), float(err)
