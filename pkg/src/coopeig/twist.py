"""Twisted (ground-state transformed) operator built from a positive eigenfunction.

Two discrete versions are provided:

* :func:`twist` derives new coefficient oracles, drift ``b + 2 a grad(log Psi)``
  and rates ``m_ij Psi_j / Psi_i``, from grid data. Assembling them gives a
  consistent O(h) discretization of the twisted generator; it is what the
  simulator and the product-identity check use.
* :func:`doob_transform` conjugates an assembled generator matrix by
  ``diag(Psi)``. Its identities hold exactly at the matrix level, which is
  what pointwise Lyapunov certificates need.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator

from .discretize import DiscreteOperator, Grid, assemble
from .errors import NonpositivePsi
from .model import ProblemSpec

EXCLUSION_BAND = 1  # cells


def _unpack(pair, grid):
    if isinstance(pair, tuple):
        psi, lam = pair
    else:
        psi, lam = pair.psi, pair.lam
        grid = grid if grid is not None else pair.grid
    if grid is None:
        raise ValueError("a grid is required when the pair is a plain tuple")
    return grid.as_grid_function(psi), float(lam), grid


def _shift_lattice(arr: np.ndarray, ax: int, step: int, fill) -> np.ndarray:
    """``out[p] = arr[p + step * e_ax]`` with ``fill`` outside."""
    out = np.full_like(arr, fill)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if step > 0:
        src[ax], dst[ax] = slice(step, None), slice(None, -step)
    else:
        src[ax], dst[ax] = slice(None, step), slice(-step, None)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def log_gradient(grid: Grid, log_psi: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """``grad log Psi`` per regime: central where both neighbours are valid, one-sided otherwise.

    ``log_psi`` and ``valid`` have shape ``(N, n_nodes)``; returns ``(N, n_nodes, d)``.
    """
    N, d = grid.regimes, grid.dim
    out = np.zeros((N, grid.n_nodes, d))
    for k in range(N):
        lp = np.where(valid[k], log_psi[k], 0.0).reshape(grid.shape)
        ok = valid[k].reshape(grid.shape)
        for ax in range(d):
            h = grid.h[ax]
            fwd_ok = ok & _shift_lattice(ok, ax, 1, False)
            bwd_ok = ok & _shift_lattice(ok, ax, -1, False)
            fwd = (_shift_lattice(lp, ax, 1, 0.0) - lp) / h
            bwd = (lp - _shift_lattice(lp, ax, -1, 0.0)) / h
            cen = (_shift_lattice(lp, ax, 1, 0.0) - _shift_lattice(lp, ax, -1, 0.0)) / (2 * h)
            g = np.where(fwd_ok & bwd_ok, cen, np.where(fwd_ok, fwd, np.where(bwd_ok, bwd, 0.0)))
            out[k, :, ax] = g.ravel()
    return out


def core_mask(grid: Grid, valid_nodes: np.ndarray, band: int = EXCLUSION_BAND) -> np.ndarray:
    """Nodes at least ``band`` cells (axis steps) away from any invalid node."""
    m = valid_nodes.reshape(grid.shape)
    for _ in range(band):
        nxt = m.copy()
        for ax in range(grid.dim):
            nxt &= _shift_lattice(m, ax, 1, False) & _shift_lattice(m, ax, -1, False)
        m = nxt
    return m.ravel()


def _nearest_fill(grid: Grid, values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace values outside ``mask`` by the value at the nearest masked node."""
    lat = mask.reshape(grid.shape)
    _, idx = ndimage.distance_transform_edt(~lat, return_indices=True)
    flat = np.ravel_multi_index(tuple(idx), grid.shape)
    return values[..., flat.ravel()]


@dataclass(frozen=True, eq=False)
class TwistedProblem:
    base: ProblemSpec
    psi: np.ndarray
    lam: float
    grid: Grid
    log_psi: np.ndarray
    grad_log_psi: np.ndarray  # (N, n_nodes, d)
    drift_correction: np.ndarray  # (N, n_nodes, d) = 2 a grad(log Psi)
    twisted_rates: np.ndarray  # (N, N, n_nodes), zero on the diagonal
    core: np.ndarray  # (n_nodes,) nodes kept after the exclusion band
    spec: ProblemSpec = field(repr=False)

    @property
    def core_grid(self) -> Grid:
        return self.grid.with_interior(np.broadcast_to(self.core, self.grid.interior.shape))

    @property
    def data_radius(self) -> float:
        """Radius of the largest origin-centred ball whose nodes all lie in the core."""
        outside = ~self.core
        if not outside.any():
            return float("inf")
        r = np.linalg.norm(self.grid.coords[outside], axis=1)
        return float(r.min()) - max(self.grid.h)


def twist(spec: ProblemSpec, pair, grid: Grid | None = None, band: int = EXCLUSION_BAND) -> TwistedProblem:
    """Twisted problem for ``pair = (Psi, lambda)`` given on ``grid``.

    ``pair`` may be an :class:`~coopeig.eigen.EigenPair`, a spectrum
    ``Eigenfunction`` or a plain ``(psi, lam)`` tuple.
    """
    psi, lam, grid = _unpack(pair, grid)
    valid = grid.interior & (psi > 0)
    if np.any(grid.interior & ~(psi > 0)):
        raise NonpositivePsi("Psi must be positive at every interior node")
    valid_nodes = valid.all(axis=0)
    if not valid_nodes.any():
        raise NonpositivePsi("no node where every component of Psi is positive")
    with np.errstate(divide="ignore"):
        log_psi = np.where(valid, np.log(np.where(valid, psi, 1.0)), -np.inf)
    grad = log_gradient(grid, log_psi, valid)
    core = core_mask(grid, valid_nodes, band)
    if not core.any():
        raise NonpositivePsi("exclusion band removes every node")
    N, d = grid.regimes, grid.dim
    x = grid.coords
    corr = np.zeros_like(grad)
    for k in range(N):
        a = spec.a(x, k)
        corr[k] = 2.0 * np.einsum("nij,nj->ni", a, grad[k])
    rates = np.zeros((N, N, grid.n_nodes))
    logratio = np.zeros((N, N, grid.n_nodes))
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            with np.errstate(invalid="ignore"):
                both = valid[i] & valid[j]
                logratio[i, j] = np.where(both, log_psi[j] - log_psi[i], 0.0)
            rates[i, j] = np.where(both, spec.m(x, i, j) * psi[j] / np.where(both, psi[i], 1.0), 0.0)
    corr_f = _nearest_fill(grid, np.moveaxis(corr, 2, 1), core)  # (N, d, n_nodes)
    lr_f = _nearest_fill(grid, logratio, core)
    axes = grid.axes()

    def interp(values: np.ndarray):
        return RegularGridInterpolator(axes, values.reshape(grid.shape), method="linear",
                                       bounds_error=False, fill_value=None)

    corr_i = [[interp(corr_f[k, ax]) for ax in range(d)] for k in range(N)]
    lr_i = {(i, j): interp(lr_f[i, j]) for i in range(N) for j in range(N) if i != j}
    base = spec

    def drift(xq, k):
        xq = np.atleast_2d(xq)
        c = np.stack([f(xq) for f in corr_i[k]], axis=1)
        return base.b(xq, k) + c

    def tw_rates(xq, i, j):
        xq = np.atleast_2d(xq)
        return base.m(xq, i, j) * np.exp(lr_i[(i, j)](xq))

    def zero(xq, k):
        return np.zeros(len(np.atleast_2d(xq)))

    tspec = replace(spec, drift=drift, rates=tw_rates, potential=zero, name=f"{spec.name}-twisted")
    return TwistedProblem(spec, psi, lam, grid, log_psi, grad, corr, rates, core, tspec)


def doob_transform(op: DiscreteOperator, psi) -> DiscreteOperator:
    """Exact discrete twist of a generator matrix by a positive grid function.

    Off-diagonal weights become ``F_rs Psi_s / Psi_r``; rows have zero sum and
    no potential. Couplings into nodes where ``Psi = 0`` vanish, so the
    transformed process never leaves the domain.
    """
    grid = op.grid
    pf = grid.as_grid_function(psi).ravel()
    pr = pf[grid.row_dof]
    if np.any(pr <= 0):
        raise NonpositivePsi("Psi must be positive on every row", where="twist.doob_transform")
    W = (sp.diags(1.0 / pr) @ op.offdiag @ sp.diags(pf)).tocsr()
    W.eliminate_zeros()
    W.sort_indices()
    rowsum = W @ np.ones(W.shape[1])
    A = sp.csr_matrix(W[:, grid.row_dof] - sp.diags(rowsum))
    return DiscreteOperator(grid, A, W, rowsum, np.zeros(grid.n_rows), bool(np.all(W.data >= 0)))


@dataclass
class ResidualReport:
    max: float
    mean: float
    residual: np.ndarray  # per core row
    grid: Grid


def product_identity_residual(spec: ProblemSpec, pair, phi, grid: Grid | None = None,
                              window=None) -> ResidualReport:
    """Discrete ``L(Phi Psi) - Phi L Psi - Psi Ltilde Phi`` at core nodes.

    ``L`` is the assembled generator of ``spec`` (no potential); ``Ltilde`` the
    assembled generator of the twisted oracles. ``window`` (a shape with
    ``contains``) restricts which nodes enter the norms.
    """
    tp = twist(spec, pair, grid)
    g = tp.core_grid
    psi = tp.psi
    phi = g.as_grid_function(phi)
    L = assemble(spec.generator(), g, include_potential=False)
    Lt = assemble(tp.spec, g, include_potential=False)
    r = L.apply(phi * psi) - g.to_rows(phi) * L.apply(psi) - g.to_rows(psi) * Lt.apply(phi)
    keep = np.ones(g.n_rows, dtype=bool)
    if window is not None:
        keep = window.contains(g.coords[g.row_node])
    rk = np.abs(r[keep])
    return ResidualReport(float(rk.max()), float(rk.mean()), r, g)
