"""Problem definition: coefficient oracles, regions, validation and irreducibility.

Regimes are 0-based in the Python API. Oracles are vectorized over points:

* ``diffusion(x, k) -> (n, d, d)``
* ``drift(x, k) -> (n, d)``
* ``potential(x, k) -> (n,)``
* ``rates(x, i, j) -> (n,)`` for ``i != j``

where ``x`` has shape ``(n, d)``. Diagonal rates are never stored; the
diagonal of the rate matrix is always minus the sum of the off-diagonals.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    CooperativityViolation,
    EllipticityViolation,
    EvalError,
    OracleFailure,
    RegionError,
)

TOL_RATE = 1e-12
EPS_ELL = 1e-12


# ------------------------------------------------------------------ shapes

@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", tuple(float(v) for v in np.atleast_1d(self.hi)))
        if len(self.lo) != len(self.hi) or any(a >= b for a, b in zip(self.lo, self.hi)):
            raise RegionError(f"empty box {self.lo}..{self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, x: np.ndarray, slack: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        lo, hi = np.array(self.lo), np.array(self.hi)
        return np.all((x >= lo - slack) & (x <= hi + slack), axis=-1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.lo), np.array(self.hi)


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in np.atleast_1d(self.center)))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius > 0:
            raise RegionError(f"ball radius must be positive, got {self.radius}")

    @property
    def dim(self) -> int:
        return len(self.center)

    def contains(self, x: np.ndarray, slack: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        r = self.radius + slack
        d2 = np.sum((x - np.array(self.center)) ** 2, axis=-1)
        return d2 <= r * r * (1 + 1e-12)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.array(self.center)
        return c - self.radius, c + self.radius


def ball(radius: float, dim: int = 1, center=None) -> Ball:
    return Ball(tuple(np.zeros(dim)) if center is None else tuple(center), radius)


Shape = Box | Ball


@dataclass(frozen=True)
class RegionSpec:
    """A set of the form union over ``i`` in ``regime_set`` of ``D_i x {i}``.

    ``shape`` is one shape shared by every regime or a per-regime list.
    ``regime_set=None`` means all regimes.
    """

    shape: Shape | tuple
    regime_set: frozenset | None = None

    def __post_init__(self):
        if isinstance(self.shape, list):
            object.__setattr__(self, "shape", tuple(self.shape))
        if self.regime_set is not None:
            rs = frozenset(int(i) for i in self.regime_set)
            if not rs:
                raise RegionError("regime_set is empty")
            object.__setattr__(self, "regime_set", rs)

    def shape_for(self, k: int) -> Shape:
        if isinstance(self.shape, tuple):
            return self.shape[k]
        return self.shape

    def regimes(self, n_regimes: int) -> list[int]:
        if self.regime_set is None:
            return list(range(n_regimes))
        return sorted(self.regime_set)

    def contains(self, x: np.ndarray, k: int) -> np.ndarray:
        """Membership of points ``x`` in regime ``k``."""
        x = np.atleast_2d(x)
        if self.regime_set is not None and k not in self.regime_set:
            return np.zeros(len(x), dtype=bool)
        return self.shape_for(k).contains(x)

    def bounds(self, n_regimes: int) -> tuple[np.ndarray, np.ndarray]:
        los, his = zip(*(self.shape_for(k).bounds() for k in self.regimes(n_regimes)))
        return np.min(los, axis=0), np.max(his, axis=0)


# ------------------------------------------------------------ problem spec

Oracle = Callable


@dataclass(frozen=True)
class ProblemSpec:
    dim: int
    regimes: int
    diffusion: Oracle
    drift: Oracle
    potential: Oracle
    rates: Oracle
    window: Box
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise RegionError(f"dim must be 1 or 2, got {self.dim}")
        if self.regimes < 1:
            raise RegionError(f"need at least one regime, got {self.regimes}")
        if self.window.dim != self.dim:
            raise RegionError("window dimension does not match dim")

    # evaluation helpers with shape normalization -------------------------
    def a(self, x, k) -> np.ndarray:
        x = np.atleast_2d(x)
        v = np.asarray(self.diffusion(x, k), dtype=float)
        return np.broadcast_to(v, (len(x), self.dim, self.dim))

    def b(self, x, k) -> np.ndarray:
        x = np.atleast_2d(x)
        v = np.asarray(self.drift(x, k), dtype=float)
        if self.dim == 1 and v.ndim <= 1:
            v = np.broadcast_to(v, (len(x),))[:, None]
        return np.broadcast_to(v, (len(x), self.dim))

    def c(self, x, k) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.broadcast_to(np.asarray(self.potential(x, k), dtype=float), (len(x),))

    def m(self, x, i, j) -> np.ndarray:
        x = np.atleast_2d(x)
        if i == j:
            raise ValueError("diagonal rates are not stored")
        return np.broadcast_to(np.asarray(self.rates(x, i, j), dtype=float), (len(x),))

    def rate_matrix(self, x) -> np.ndarray:
        """Full rate matrices ``(n, N, N)`` with zero row sums."""
        x = np.atleast_2d(x)
        n, N = len(x), self.regimes
        M = np.zeros((n, N, N))
        for i, j in itertools.permutations(range(N), 2):
            M[:, i, j] = self.m(x, i, j)
        M[:, range(N), range(N)] = -M.sum(axis=2)
        return M

    # derived problems ----------------------------------------------------
    def with_potential(self, potential: Oracle) -> "ProblemSpec":
        return replace(self, potential=potential)

    def add_potential(self, h: Oracle, t: float = 1.0) -> "ProblemSpec":
        """Problem with potential ``c + t*h``."""
        base = self.potential
        return replace(self, potential=lambda x, k: base(x, k) + t * np.asarray(h(x, k)))

    def shifted(self, kappa: float) -> "ProblemSpec":
        base = self.potential
        return replace(self, potential=lambda x, k: base(x, k) + kappa)

    def generator(self) -> "ProblemSpec":
        """Same problem with zero potential."""
        return replace(self, potential=_zero)


def _zero(x, k):
    return np.zeros(len(np.atleast_2d(x)))


def make_problem(
    dim: int,
    regimes: int,
    window: Box,
    diffusion=1.0,
    drift=0.0,
    potential=0.0,
    rates=None,
    name: str = "",
) -> ProblemSpec:
    """Build a :class:`ProblemSpec` from constants or callables.

    ``diffusion`` may be a scalar (isotropic), a callable returning ``(n,)``
    (isotropic) or ``(n, d, d)``. ``drift`` may be a scalar, a ``d``-vector
    or a callable returning ``(n, d)`` (or ``(n,)`` when ``d == 1``).
    ``rates`` may be ``None`` (no coupling), an ``N x N`` array of constants,
    a dict ``{(i, j): value-or-callable}`` or a callable ``(x, i, j)``.
    """
    eye = np.eye(dim)

    if callable(diffusion):
        def a(x, k, f=diffusion):
            v = np.asarray(f(x, k), dtype=float)
            if v.ndim <= 1:
                v = np.broadcast_to(v, (len(np.atleast_2d(x)),))[:, None, None] * eye
            return v
    else:
        val = np.asarray(diffusion, dtype=float)
        mat = val * eye if val.ndim == 0 else val

        def a(x, k, mat=mat):
            return np.broadcast_to(mat, (len(np.atleast_2d(x)), dim, dim))

    if callable(drift):
        def b(x, k, f=drift):
            v = np.asarray(f(x, k), dtype=float)
            n = len(np.atleast_2d(x))
            if dim == 1 and v.ndim <= 1:
                v = np.broadcast_to(v, (n,))[:, None]
            return v
    else:
        vec = np.broadcast_to(np.asarray(drift, dtype=float), (dim,))

        def b(x, k, vec=vec):
            return np.broadcast_to(vec, (len(np.atleast_2d(x)), dim))

    if callable(potential):
        c = potential
    else:
        cval = float(potential)

        def c(x, k, cval=cval):
            return np.full(len(np.atleast_2d(x)), cval)

    if rates is None:
        def m(x, i, j):
            return np.zeros(len(np.atleast_2d(x)))
    elif callable(rates):
        m = rates
    elif isinstance(rates, dict):
        table = dict(rates)

        def m(x, i, j, table=table):
            v = table.get((i, j), 0.0)
            n = len(np.atleast_2d(x))
            if callable(v):
                return np.broadcast_to(np.asarray(v(x), dtype=float), (n,))
            return np.full(n, float(v))
    else:
        R = np.asarray(rates, dtype=float)

        def m(x, i, j, R=R):
            return np.full(len(np.atleast_2d(x)), R[i, j])

    return ProblemSpec(dim, regimes, a, b, c, m, window, name=name)


# -------------------------------------------------------------- validation

@dataclass
class Violation:
    kind: str
    point: tuple
    regime: tuple
    value: float


@dataclass
class ValidationReport:
    samples: int
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def raise_if_failed(self) -> None:
        errors = {
            "oracle": OracleFailure,
            "cooperativity": CooperativityViolation,
            "symmetry": EllipticityViolation,
            "ellipticity": EllipticityViolation,
        }
        if self.violations:
            v = self.violations[0]
            raise errors[v.kind](
                f"{v.kind} violation at x={v.point}, regime(s)={v.regime}, value={v.value:.6g}"
            )


def sample_points(window: Box, density: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, density) for lo, hi in zip(window.lo, window.hi)]
    return np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)


def _checked(fn, x, what, regime, report):
    try:
        v = np.asarray(fn(), dtype=float)
    except EvalError as exc:
        report.violations.append(Violation("oracle", tuple(x[0]), regime, float("nan")))
        raise OracleFailure(f"{what} oracle failed: {exc}") from exc
    bad = ~np.isfinite(v)
    if bad.any():
        idx = np.argwhere(bad)[0][0]
        report.violations.append(Violation("oracle", tuple(x[idx]), regime, float(v.flat[np.flatnonzero(bad)[0]])))
        return None
    return v


def validate(spec: ProblemSpec, sample_density: int = 21, strict: bool = True) -> ValidationReport:
    """Sample every oracle on a lattice over the window and check the model assumptions.

    With ``strict`` (default) the first violation is raised as its error class;
    otherwise the report lists all violations.
    """
    if sample_density < 2:
        raise ValueError("sample_density must be at least 2")
    x = sample_points(spec.window, sample_density)
    report = ValidationReport(samples=len(x))
    for k in range(spec.regimes):
        a = _checked(lambda: spec.a(x, k), x, "diffusion", (k,), report)
        if a is not None:
            asym = np.max(np.abs(a - np.swapaxes(a, 1, 2)), axis=(1, 2))
            scale = 1.0 + np.max(np.abs(a), axis=(1, 2))
            for idx in np.flatnonzero(asym > 1e-12 * scale)[:1]:
                report.violations.append(Violation("symmetry", tuple(x[idx]), (k,), float(asym[idx])))
            ev = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, 1, 2)))[:, 0]
            for idx in np.flatnonzero(ev < EPS_ELL)[:1]:
                report.violations.append(Violation("ellipticity", tuple(x[idx]), (k,), float(ev[idx])))
        _checked(lambda: spec.b(x, k), x, "drift", (k,), report)
        _checked(lambda: spec.c(x, k), x, "potential", (k,), report)
        for j in range(spec.regimes):
            if j == k:
                continue
            m = _checked(lambda: spec.m(x, k, j), x, "rates", (k, j), report)
            if m is not None:
                for idx in np.flatnonzero(m < 0)[:1]:
                    report.violations.append(Violation("cooperativity", tuple(x[idx]), (k, j), float(m[idx])))
    if strict:
        report.raise_if_failed()
    return report


@dataclass(frozen=True)
class IrreducibilityResult:
    irreducible: bool
    partition: tuple | None = None  # (S1, S2) with no edge from S1 into S2

    def __str__(self) -> str:
        if self.irreducible:
            return "irreducible"
        s1, s2 = ({i + 1 for i in s} for s in self.partition)
        return f"reducible({sorted(s1)}, {sorted(s2)})"


def rate_graph(spec: ProblemSpec, sample_density: int = 21, points=None) -> np.ndarray:
    """Boolean adjacency ``E[i, j]``: some sampled point has ``m_ij > TOL_RATE``."""
    x = sample_points(spec.window, sample_density) if points is None else np.atleast_2d(points)
    N = spec.regimes
    E = np.zeros((N, N), dtype=bool)
    for i, j in itertools.permutations(range(N), 2):
        E[i, j] = bool(np.any(spec.m(x, i, j) > TOL_RATE))
    return E


def _reachable(E: np.ndarray, start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(E[i]):
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return seen


def irreducibility_check(spec: ProblemSpec, sample_density: int = 21, points=None) -> IrreducibilityResult:
    """Strong connectivity of the sampled rate graph.

    When reducible, returns ``(S1, S2)`` where ``S1`` is the set reachable from
    the first regime that does not reach everything, so no edge leaves ``S1``.
    """
    E = rate_graph(spec, sample_density, points)
    everything = set(range(spec.regimes))
    for v in range(spec.regimes):
        reach = _reachable(E, v)
        if reach != everything:
            return IrreducibilityResult(False, (frozenset(reach), frozenset(everything - reach)))
    return IrreducibilityResult(True)


def interval_box(lo: Sequence[float] | float, hi: Sequence[float] | float) -> Box:
    return Box(tuple(np.atleast_1d(lo)), tuple(np.atleast_1d(hi)))
