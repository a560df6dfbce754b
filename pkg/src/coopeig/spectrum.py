"""Generalized principal eigenvalue on the whole space via growing balls.

``lambda_star`` solves the Dirichlet eigenproblem on balls of increasing
radius; the eigenvalues decrease to the limit. ``eigenfunction_at`` builds a
positive solution for any ``lambda`` below the limit from resolvents with a
source near the outer boundary, and ``perturbation_sweep`` measures how the
limit reacts to a nonnegative bump in the potential.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .discretize import Grid, assemble, build_grid, solve_dirichlet
from .eigen import EigenPair, default_tol, normalization_node, normalize, principal_eigenpair
from .errors import NonConvergent, NotDecreasing, ResolventNotPositive
from .model import Ball, ProblemSpec, RegionSpec, ball

REL_TOL = 1e-10


@dataclass
class PrincipalLimit:
    radii: list
    lambdas: list
    brackets: list
    lambda_star: float
    uncertainty: float
    extrapolated: bool
    converged: bool
    psi_star: np.ndarray
    grid: Grid
    pair: EigenPair  # eigenpair on the largest radius
    window_radius: float
    tol: float

    @property
    def gap_tol(self) -> float:
        return self.uncertainty

    def window_mask(self) -> np.ndarray:
        r2 = np.sum(self.grid.coords ** 2, axis=1)
        return r2 <= self.window_radius ** 2 * (1 + 1e-12)

    @property
    def window_profile(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates and Psi values on the fixed inner ball."""
        m = self.window_mask()
        return self.grid.coords[m], self.psi_star[:, m]

    def flatness(self) -> float:
        """Max relative deviation of Psi from 1 on the inner window."""
        _, vals = self.window_profile
        return float(np.max(np.abs(vals - 1.0)))


@dataclass(frozen=True)
class PerturbationSpec:
    """Nonnegative bump ``h_k(x)`` supported in ``ball(0, support_radius)``."""

    bump: Callable
    support_radius: float
    scales: tuple = (-1.0, -0.5, 0.0, 0.5, 1.0)


def aitken(values: Sequence[float], noise: float) -> float | None:
    """Aitken delta-squared limit of the last three values, or None when not contraction-like."""
    if len(values) < 3:
        return None
    l1, l2, l3 = values[-3:]
    d1, d2 = l2 - l1, l3 - l2
    if not (d1 < -noise and d2 < -noise):
        return None
    r = d2 / d1
    if not 0.0 < r < 1.0:
        return None
    if len(values) >= 4:
        d0 = l1 - values[-4]
        if d0 >= 0:
            return None
        r0 = d1 / d0
        if abs(r - r0) > 0.5 * max(r, r0):
            return None
    return l3 + d2 * r / (1.0 - r)


def ball_region(spec: ProblemSpec, radius: float) -> RegionSpec:
    return RegionSpec(ball(radius, spec.dim))


def dirichlet_pair(spec: ProblemSpec, region: RegionSpec, h, tol: float | None = None) -> EigenPair:
    grid = build_grid(spec, region, h)
    op = assemble(spec, grid, include_potential=True)
    return principal_eigenpair(op, tol=tol)


def lambda_star(spec: ProblemSpec, radii: Sequence[float], h, tol: float = REL_TOL,
                window_radius: float | None = None, strict: bool = False) -> PrincipalLimit:
    """Nested-ball approximation of the principal eigenvalue on the whole space.

    ``tol`` is relative: each eigen solve stops at ``tol * (1 + |lambda|)``
    and the sequence counts as converged when the last two eigenvalues agree to
    that tolerance. With ``strict`` a non-converged sequence raises
    :class:`NonConvergent` (the result rides along as ``partial``).
    """
    radii = [float(r) for r in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be increasing")
    if window_radius is None:
        window_radius = min(2.0, radii[0] / 2)
    lambdas, brackets, pairs = [], [], []
    for R in radii:
        grid = build_grid(spec, ball_region(spec, R), h)
        pair = principal_eigenpair(assemble(spec, grid), rtol=tol)
        if lambdas:
            slack = 2 * default_tol(lambdas[-1], tol)
            if pair.lam > lambdas[-1] + slack:
                raise NotDecreasing(
                    f"lambda at radius {R} is {pair.lam:.12g} > {lambdas[-1]:.12g} at the previous radius",
                    partial=(radii[: len(lambdas) + 1], lambdas + [pair.lam]))
        lambdas.append(pair.lam)
        brackets.append(pair.bracket)
        pairs.append(pair)
    last = pairs[-1]
    width = last.width
    if len(lambdas) >= 2:
        step = abs(lambdas[-1] - lambdas[-2])
        converged = step <= tol * (1 + abs(lambdas[-2]))
    else:
        step, converged = float("inf"), False
    est = aitken(lambdas, noise=2 * width)
    extrapolated = est is not None
    lam_star = est if extrapolated else lambdas[-1]
    result = PrincipalLimit(
        radii=radii, lambdas=lambdas, brackets=brackets, lambda_star=float(lam_star),
        uncertainty=float(step + width) if np.isfinite(step) else float("inf"),
        extrapolated=extrapolated, converged=converged, psi_star=last.psi, grid=last.grid,
        pair=last, window_radius=float(window_radius), tol=tol)
    if strict and not converged:
        raise NonConvergent(f"last step {step:.3e} exceeds tolerance", partial=result)
    return result


@dataclass
class Eigenfunction:
    lam: float
    psi: np.ndarray
    grid: Grid
    source: Ball


def source_ball(radius: float, dim: int, h: float) -> Ball:
    """Source cell in the annulus ``[0.75 R, 0.9 R]`` on the first axis."""
    center = np.zeros(dim)
    center[0] = 0.825 * radius
    return Ball(tuple(center), max(0.075 * radius, 1.01 * h))


def eigenfunction_at(spec: ProblemSpec, lam: float, radii: Sequence[float], h,
                     all_radii: bool = False):
    """Positive solution of ``(A + lam) Psi = 0`` away from a source near the boundary.

    On each radius solves ``(A + lam) u = -1_source`` with zero boundary data,
    checks positivity and normalizes at the origin. Returns the largest-radius
    solution (or all of them with ``all_radii``).
    """
    hmax = float(np.max(np.atleast_1d(h)))
    out = []
    for R in radii:
        grid = build_grid(spec, ball_region(spec, R), h)
        op = assemble(spec, grid).shifted(lam)
        src = source_ball(R, spec.dim, hmax)
        f = np.where(src.contains(grid.coords), 1.0, 0.0)
        f = np.broadcast_to(f, grid.interior.shape) * grid.interior
        u = solve_dirichlet(op, 0.0, f)
        rows = grid.to_rows(u)
        if not np.all(rows > 0):
            raise ResolventNotPositive(
                f"resolvent at lambda={lam:.6g} is not positive on radius {R} "
                f"(min {rows.min():.3e})", partial=out)
        node = normalization_node(grid)
        out.append(Eigenfunction(lam, normalize(u, grid, node), grid, src))
    return out if all_radii else out[-1]


@dataclass
class MonotonicityReport:
    scales: list
    lambda_star: list
    uncertainty: list
    gaps: dict  # t -> lambda*(c) - lambda*(c + t h)
    gap_tol: dict
    right_monotone: bool
    strictly_monotone: bool
    concavity_defect: float  # on the largest-radius Dirichlet eigenvalues (exact discrete family)
    concavity_defect_extrapolated: float  # same on the extrapolated lambda*
    sign_consistent: bool
    limits: list = field(repr=False, default_factory=list)


def perturbation_sweep(spec: ProblemSpec, pert: PerturbationSpec, radii: Sequence[float], h,
                       tol: float = REL_TOL) -> MonotonicityReport:
    """Evaluate ``t -> lambda*(c + t h)`` over ``pert.scales``.

    Right-monotone: every positive ``t`` lowers lambda* by more than the
    combined uncertainty. Strictly monotone: every negative ``t`` raises it by
    more than that.
    """
    scales = sorted(float(t) for t in pert.scales)
    if 0.0 not in scales or not any(t > 0 for t in scales) or not any(t < 0 for t in scales):
        raise ValueError("scale grid must contain 0 and values of both signs")
    if pert.support_radius >= min(radii):
        raise ValueError("bump support must lie inside the smallest radius")
    limits = [lambda_star(spec.add_potential(pert.bump, t) if t else spec, radii, h, tol) for t in scales]
    lam = [p.lambda_star for p in limits]
    unc = [p.uncertainty for p in limits]
    i0 = scales.index(0.0)
    gaps, gtol = {}, {}
    for t, l, u in zip(scales, lam, unc):
        if t != 0.0:
            gaps[t] = lam[i0] - l
            gtol[t] = unc[i0] + u
    right = all(gaps[t] > gtol[t] for t in gaps if t > 0)
    strict = all(-gaps[t] > gtol[t] for t in gaps if t < 0)
    pos_signs = {np.sign(gaps[t]) for t in gaps if t > 0 and abs(gaps[t]) > gtol[t]}
    return MonotonicityReport(scales, lam, unc, gaps, gtol, right, strict,
                              concavity_defect(scales, [p.lambdas[-1] for p in limits]),
                              concavity_defect(scales, lam), len(pos_signs) <= 1, limits)


def concavity_defect(ts: Sequence[float], values: Sequence[float]) -> float:
    """Largest amount by which a value falls below the chord of its neighbours."""
    defect = -np.inf
    for i in range(1, len(ts) - 1):
        w = (ts[i + 1] - ts[i]) / (ts[i + 1] - ts[i - 1])
        defect = max(defect, w * values[i - 1] + (1 - w) * values[i + 1] - values[i])
    return float(defect)
