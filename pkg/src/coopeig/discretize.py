"""Lattice grids, finite-difference assembly of the coupled operator, Dirichlet solves.

All grids live on the global lattice ``h * Z^d`` so that grids built for
nested regions share nodes exactly. A grid function is an array of shape
``(N, n_nodes)``. Unknowns ("rows") are the interior ``(regime, node)`` pairs,
numbered regime-major; every other pair carries Dirichlet data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .errors import DisconnectedInterior, EmptyInterior, MixedTermPositivityFailure, RegionError, SingularSystem
from .model import ProblemSpec, RegionSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Grid:
    h: tuple  # spacing per axis
    lo_index: tuple  # global lattice index of the first node on each axis
    shape: tuple  # nodes per axis
    interior: np.ndarray  # (N, n_nodes) bool

    def __post_init__(self):
        interior = np.asarray(self.interior, dtype=bool)
        interior.setflags(write=False)
        object.__setattr__(self, "interior", interior)
        edge = np.zeros(self.shape, dtype=bool)
        for ax in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[ax] = 0
            edge[tuple(sl)] = True
            sl[ax] = -1
            edge[tuple(sl)] = True
        if np.any(interior[:, edge.ravel()]):
            raise RegionError("interior node on the lattice box edge; stencil would dangle",
                              where="discretize.build_grid")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def regimes(self) -> int:
        return self.interior.shape[0]

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def strides(self) -> np.ndarray:
        return np.array([int(np.prod(self.shape[a + 1:])) for a in range(self.dim)])

    @cached_property
    def multi_index(self) -> np.ndarray:
        """Global lattice indices ``(n_nodes, d)``."""
        idx = np.indices(self.shape).reshape(self.dim, -1).T
        return idx + np.array(self.lo_index)

    @cached_property
    def coords(self) -> np.ndarray:
        return self.multi_index * np.array(self.h)

    @cached_property
    def row_dof(self) -> np.ndarray:
        """Full-DOF index (``k * n_nodes + node``) of each row."""
        return np.flatnonzero(self.interior.ravel())

    @cached_property
    def rows(self) -> np.ndarray:
        r = np.full(self.interior.size, -1, dtype=np.int64)
        r[self.row_dof] = np.arange(len(self.row_dof))
        return r.reshape(self.interior.shape)

    @property
    def n_rows(self) -> int:
        return len(self.row_dof)

    @cached_property
    def row_regime(self) -> np.ndarray:
        return self.row_dof // self.n_nodes

    @cached_property
    def row_node(self) -> np.ndarray:
        return self.row_dof % self.n_nodes

    # grid functions -------------------------------------------------------
    def full(self, value=0.0) -> np.ndarray:
        return np.full(self.interior.shape, value, dtype=float)

    def as_grid_function(self, value) -> np.ndarray:
        if np.isscalar(value):
            return self.full(float(value))
        v = np.asarray(value, dtype=float)
        if v.shape != self.interior.shape:
            raise ValueError(f"grid function must have shape {self.interior.shape}, got {v.shape}")
        return v

    def to_rows(self, G) -> np.ndarray:
        return self.as_grid_function(G).ravel()[self.row_dof]

    def from_rows(self, v, fill: float = 0.0) -> np.ndarray:
        out = self.full(fill).ravel()
        out[self.row_dof] = v
        return out.reshape(self.interior.shape)

    def shift(self, node: np.ndarray, offset) -> np.ndarray:
        """Flat index of ``node + offset``, assumed inside the box."""
        return node + int(np.dot(offset, self.strides))

    def nearest_node(self, point) -> int:
        idx = np.rint(np.asarray(point, dtype=float) / np.array(self.h)).astype(int)
        local = idx - np.array(self.lo_index)
        if np.any(local < 0) or np.any(local >= np.array(self.shape)):
            raise RegionError(f"point {point} outside the grid", where="discretize.grid")
        return int(np.dot(local, self.strides))

    def locate(self, global_index: np.ndarray) -> np.ndarray:
        """Flat node index of each global lattice index, -1 when off-grid."""
        local = np.atleast_2d(global_index) - np.array(self.lo_index)
        ok = np.all((local >= 0) & (local < np.array(self.shape)), axis=1)
        out = np.full(len(local), -1, dtype=np.int64)
        out[ok] = local[ok] @ self.strides
        return out

    def transfer(self, G, target: "Grid", fill: float = 0.0) -> np.ndarray:
        """Values of grid function ``G`` (on self) at the nodes of ``target``."""
        G = self.as_grid_function(G)
        loc = self.locate(target.multi_index)
        out = np.full((G.shape[0], target.n_nodes), fill)
        ok = loc >= 0
        out[:, ok] = G[:, loc[ok]]
        return out

    def with_interior(self, interior: np.ndarray) -> "Grid":
        return replace(self, interior=np.asarray(interior, dtype=bool))

    def lattice_array(self, values: np.ndarray) -> np.ndarray:
        """Reshape a per-node vector to the lattice shape."""
        return np.asarray(values).reshape(self.shape)

    def axes(self) -> list[np.ndarray]:
        return [(self.lo_index[a] + np.arange(self.shape[a])) * self.h[a] for a in range(self.dim)]


def _spacing(h, dim: int) -> tuple:
    return tuple(float(v) for v in np.broadcast_to(np.asarray(h, dtype=float), (dim,)))


def lattice_box(lo, hi, h, margin: int = 1) -> tuple[tuple, tuple]:
    """Lattice index range covering ``[lo, hi]`` plus ``margin`` cells."""
    h = np.asarray(h, dtype=float)
    i_lo = np.floor(np.asarray(lo) / h + 1e-9).astype(int) - margin
    i_hi = np.ceil(np.asarray(hi) / h - 1e-9).astype(int) + margin
    return tuple(int(v) for v in i_lo), tuple(int(v) for v in (i_hi - i_lo + 1))


def interior_of(member: np.ndarray, shape: tuple) -> np.ndarray:
    """Nodes of ``member`` whose axis neighbours are all in ``member``."""
    m = member.reshape(shape)
    inner = m.copy()
    for ax in range(len(shape)):
        for step in (1, -1):
            shifted = np.zeros_like(m)
            src = [slice(None)] * len(shape)
            dst = [slice(None)] * len(shape)
            if step == 1:
                src[ax], dst[ax] = slice(1, None), slice(None, -1)
            else:
                src[ax], dst[ax] = slice(None, -1), slice(1, None)
            shifted[tuple(dst)] = m[tuple(src)]
            inner &= shifted
    edge = np.zeros(shape, dtype=bool)
    for ax in range(len(shape)):
        sl = [slice(None)] * len(shape)
        sl[ax] = 0
        edge[tuple(sl)] = True
        sl[ax] = -1
        edge[tuple(sl)] = True
    inner &= ~edge
    return inner.ravel()


def lattice_grid(spec_regimes: int, lo, hi, h, margin: int = 1) -> Grid:
    """Grid over a box of the lattice with an empty interior, for callers building masks."""
    dim = len(np.atleast_1d(lo))
    hh = _spacing(h, dim)
    lo_index, shape = lattice_box(np.atleast_1d(lo), np.atleast_1d(hi), hh, margin)
    n = int(np.prod(shape))
    return Grid(hh, lo_index, shape, np.zeros((spec_regimes, n), dtype=bool))


def region_members(grid: Grid, region: RegionSpec, k: int) -> np.ndarray:
    return region.contains(grid.coords, k)


def region_interior(grid: Grid, region: RegionSpec, k: int) -> np.ndarray:
    return interior_of(region_members(grid, region, k), grid.shape)


def build_grid(spec: ProblemSpec, region: RegionSpec, h, *, margin: int = 1,
               check_connected: bool = True) -> Grid:
    """Rasterize ``region`` on the lattice with spacing ``h``.

    A node is interior for regime ``k`` when it lies in the closed shape and
    so do all its axis neighbours. Everything else in the bounding box carries
    Dirichlet data.
    """
    hh = _spacing(h, spec.dim)
    lo, hi = region.bounds(spec.regimes)
    wlo, whi = spec.window.bounds()
    slack = max(hh)
    if np.any(lo < wlo - slack) or np.any(hi > whi + slack):
        raise RegionError(f"region [{lo}, {hi}] not inside window [{wlo}, {whi}]",
                          where="discretize.build_grid")
    grid = lattice_grid(spec.regimes, lo, hi, hh, margin + 1)
    interior = np.zeros_like(grid.interior)
    for k in region.regimes(spec.regimes):
        interior[k] = region_interior(grid, region, k)
        if not interior[k].any():
            raise EmptyInterior(f"regime {k} has no interior nodes at h={hh}")
        if check_connected:
            _, n_comp = ndimage.label(interior[k].reshape(grid.shape))
            if n_comp > 1:
                raise DisconnectedInterior(f"regime {k} interior has {n_comp} components")
    return grid.with_interior(interior)


# ---------------------------------------------------------------- operator

@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Assembled operator on the rows of ``grid``.

    ``offdiag`` holds every off-diagonal coupling against the full set of
    ``N * n_nodes`` degrees of freedom, so boundary data can be applied.
    ``A`` is the square interior block including the diagonal.
    """

    grid: Grid
    A: sp.csr_matrix
    offdiag: sp.csr_matrix
    rowsum: np.ndarray  # offdiag @ 1, so the generator diagonal is -rowsum
    potential: np.ndarray  # zeroth-order part added on the diagonal
    metzler_ok: bool

    @property
    def s0(self) -> float:
        return float(np.max(np.abs(self.A.diagonal()))) + 1.0

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def shifted(self, kappa: float) -> "DiscreteOperator":
        """Operator for potential ``c + kappa``."""
        return replace(self, A=(self.A + kappa * sp.identity(self.n, format="csr")).tocsr(),
                       potential=self.potential + kappa)

    def apply(self, u) -> np.ndarray:
        """Apply to a full grid function, in difference form.

        Computes ``sum_s F_rs (u_s - u_r) + c_r u_r`` so constants are
        annihilated exactly when the potential vanishes.
        """
        uf = self.grid.as_grid_function(u).ravel()
        ur = uf[self.grid.row_dof]
        return (self.offdiag @ uf - self.rowsum * ur) + self.potential * ur

    def boundary_coupling(self, g) -> np.ndarray:
        gf = self.grid.as_grid_function(g).ravel().copy()
        gf[self.grid.row_dof] = 0.0
        return self.offdiag @ gf

    def write_matrix_market(self, path) -> None:
        """Export ``A`` in Matrix Market coordinate format (1-based ``row col value``)."""
        scipy.io.mmwrite(str(path), self.A.tocoo(), field="real", symmetry="general")


def assemble(spec: ProblemSpec, grid: Grid, include_potential: bool = True,
             require_metzler: bool = False) -> DiscreteOperator:
    """Finite-difference operator: second differences, upwind drift, point coupling."""
    N, n_nodes, d = grid.regimes, grid.n_nodes, grid.dim
    h = np.array(grid.h)
    rows_of = grid.rows
    R, C, V = [], [], []
    potential = np.zeros(grid.n_rows)

    def add(row, node, regime, val):
        R.append(row)
        C.append(regime * n_nodes + node)
        V.append(val)

    for k in range(N):
        nodes = np.flatnonzero(grid.interior[k])
        if nodes.size == 0:
            continue
        x = grid.coords[nodes]
        row = rows_of[k, nodes]
        a = spec.a(x, k)
        b = spec.b(x, k)
        for ax in range(d):
            e = np.zeros(d, dtype=int)
            e[ax] = 1
            diff = a[:, ax, ax] / h[ax] ** 2
            bp = np.where(b[:, ax] >= 0, b[:, ax], 0.0) / h[ax]
            bm = np.where(b[:, ax] < 0, -b[:, ax], 0.0) / h[ax]
            add(row, grid.shift(nodes, e), k, diff + bp)
            add(row, grid.shift(nodes, -e), k, diff + bm)
        if d == 2:
            a12 = a[:, 0, 1]
            w = np.abs(a12) / (h[0] * h[1])
            pos = a12 >= 0
            for off in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                add(row, grid.shift(nodes, off), k, -w)
            add(row, grid.shift(nodes, (1, 1)), k, np.where(pos, w, 0.0))
            add(row, grid.shift(nodes, (-1, -1)), k, np.where(pos, w, 0.0))
            add(row, grid.shift(nodes, (1, -1)), k, np.where(pos, 0.0, w))
            add(row, grid.shift(nodes, (-1, 1)), k, np.where(pos, 0.0, w))
        for j in range(N):
            if j != k:
                add(row, nodes, j, spec.m(x, k, j))
        if include_potential:
            potential[row] = spec.c(x, k)

    n_dofs = N * n_nodes
    if R:
        Rr = np.concatenate(R)
        Cc = np.concatenate(C)
        Vv = np.concatenate([np.broadcast_to(v, r.shape) for v, r in zip(V, R)]).astype(float)
    else:
        Rr = Cc = np.zeros(0, dtype=int)
        Vv = np.zeros(0)
    F = sp.coo_matrix((Vv, (Rr, Cc)), shape=(grid.n_rows, n_dofs)).tocsr()
    F.sum_duplicates()
    F.eliminate_zeros()
    F.sort_indices()
    metzler_ok = bool(np.all(F.data >= 0))
    if require_metzler and not metzler_ok:
        raise MixedTermPositivityFailure(
            f"negative off-diagonal {F.data.min():.3e}; need |a12| <= min(a11, a22) on a square grid")
    rowsum = F @ np.ones(n_dofs)
    A = F[:, grid.row_dof] + sp.diags(-rowsum + potential)
    A = sp.csr_matrix(A)
    A.sort_indices()
    return DiscreteOperator(grid, A, F, rowsum, potential, metzler_ok)


def solve_dirichlet(op: DiscreteOperator, boundary_data=0.0, rhs=0.0, *,
                    refine_steps: int = 3) -> np.ndarray:
    """Solve ``A u = -f`` on interior rows with ``u = g`` elsewhere.

    Returns the full grid function. Uses a sparse LU factorization with up to
    ``refine_steps`` rounds of iterative refinement to reach the residual
    target ``1e-10 * (1 + |f| + |g|)``.
    """
    grid = op.grid
    g = grid.as_grid_function(boundary_data)
    f = grid.to_rows(rhs)
    b = -f - op.boundary_coupling(g)
    if op.n == 0:
        return g.copy()
    try:
        lu = spla.splu(op.A.tocsc())
    except RuntimeError as exc:
        raise SingularSystem(str(exc), 0.0) from exc
    pivots = np.abs(lu.U.diagonal())
    if not np.all(np.isfinite(pivots)) or pivots.min() == 0.0:
        raise SingularSystem("zero pivot in LU factorization", float(pivots.min()))
    u = lu.solve(b)
    target = 1e-10 * (1 + np.max(np.abs(f), initial=0.0) + np.max(np.abs(g), initial=0.0))
    for _ in range(refine_steps):
        r = b - op.A @ u
        if np.max(np.abs(r)) <= target:
            break
        u = u + lu.solve(r)
    res = float(np.max(np.abs(b - op.A @ u)))
    if not np.isfinite(res):
        raise SingularSystem("non-finite solution", float(pivots.min()))
    if res > target:
        log.warning("solve_dirichlet residual %.3e above target %.3e", res, target)
    out = g.copy().ravel()
    out[grid.row_dof] = u
    return out.reshape(g.shape)
