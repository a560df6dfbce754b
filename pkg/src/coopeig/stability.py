"""Regularity, recurrence and exponential-stability classifiers plus Lyapunov certificates.

Verdicts are three-valued: each test either finds evidence beyond an explicit
threshold or answers ``inconclusive``. Truncated domains can only ever give
evidence for the asymptotic statements.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .discretize import Grid, assemble, build_grid, region_interior, solve_dirichlet
from .eigen import principal_eigenpair
from .errors import GapNonpositive
from .model import Ball, ProblemSpec, RegionSpec, ball
from .spectrum import PerturbationSpec, PrincipalLimit, aitken, lambda_star
from .twist import doob_transform, twist

REG_TOL = 1e-3
HIT_TOL = 1e-2
RESID_TOL = 1e-8

REGULAR, NOT_REGULAR = "regular", "not-regular"
RECURRENT, TRANSIENT = "recurrent", "transient"
EXP_STABLE, INCONCLUSIVE = "exp-stable", "inconclusive"


@dataclass
class Verdict:
    classification: str
    evidence: dict  # radius -> diagnostic value
    thresholds: dict
    details: dict = field(default_factory=dict)


def _window(grid: Grid, radius: float) -> np.ndarray:
    return np.sum(grid.coords ** 2, axis=1) <= radius ** 2 * (1 + 1e-12)


# ------------------------------------------------------------- regularity

def regularity_test(gen: ProblemSpec, C: float = 1.0, radii: Sequence[float] = (4, 8, 16), h=0.05,
                    reg_tol: float = REG_TOL, window_radius: float | None = None) -> Verdict:
    """Solve ``L u = C u`` on growing balls with ``u = 1`` on the boundary.

    ``u_n`` must be pointwise nonincreasing in ``n`` (comparison principle,
    asserted on shared nodes). Regular iff the inner-window max of the last
    ``u`` is at most ``reg_tol``; not regular iff it stays above ``10 reg_tol``
    over the last two radii.
    """
    radii = [float(r) for r in radii]
    wr = min(2.0, radii[0] / 2) if window_radius is None else window_radius
    evidence = {}
    prev = None
    monotone = True
    for R in radii:
        grid = build_grid(gen, RegionSpec(ball(R, gen.dim)), h)
        op = assemble(gen, grid, include_potential=False).shifted(-C)
        u = solve_dirichlet(op, 1.0, 0.0)
        if prev is not None:
            pgrid, pu = prev
            on_prev = pgrid.transfer(pgrid.interior.astype(float), grid) > 0
            old = pgrid.transfer(pu, grid)
            monotone &= bool(np.all(u[on_prev] <= old[on_prev] + 1e-12))
        win = _window(grid, wr)
        evidence[R] = float(np.max(u[:, win]))
        prev = (grid, u)
    vals = list(evidence.values())
    if vals[-1] <= reg_tol:
        cls = REGULAR
    elif len(vals) >= 2 and min(vals[-2:]) > 10 * reg_tol and abs(vals[-1] - vals[-2]) <= 0.1 * vals[-1]:
        cls = NOT_REGULAR
    else:
        cls = INCONCLUSIVE
    if not monotone:
        raise AssertionError("regularity_test: u_n is not pointwise nonincreasing in n")
    return Verdict(cls, evidence, {"reg_tol": reg_tol, "C": C, "window_radius": wr},
                   {"monotone": monotone})


# ------------------------------------------------------------- recurrence

def _target_radius(target: RegionSpec, n_regimes: int) -> float:
    lo, hi = target.bounds(n_regimes)
    return float(max(np.max(np.abs(lo)), np.max(np.abs(hi))))


def hitting_probability(gen: ProblemSpec, target: RegionSpec, R: float, h, outer: float = 0.0):
    """Probability of reaching ``target`` before leaving ``B_R``, as a grid function."""
    grid = build_grid(gen, RegionSpec(ball(R, gen.dim)), h, check_connected=False)
    tmask = np.stack([target.contains(grid.coords, k) for k in range(gen.regimes)])
    inner = grid.interior & ~tmask
    g2 = grid.with_interior(inner)
    op = assemble(gen, g2, include_potential=False)
    data = np.where(tmask, 1.0, outer)
    return g2, tmask, solve_dirichlet(op, data, 0.0)


def recurrence_test(gen: ProblemSpec, target: RegionSpec, radii: Sequence[float] = (8, 16, 32), h=0.05,
                    hit_tol: float = HIT_TOL, window_radius: float | None = None) -> Verdict:
    """Hitting probabilities of ``target`` before exiting growing balls.

    The deficit ``1 - min u_R`` over the inner window must go to zero for a
    recurrent set. Recurrent iff the last deficit, or its Aitken limit when
    the deficits shrink geometrically, is at most ``hit_tol``. Transient iff
    the deficit has settled above ``10 hit_tol``.
    """
    radii = [float(r) for r in radii]
    wr = 2.0 * _target_radius(target, gen.regimes) if window_radius is None else window_radius
    deficits, gaps = {}, {}
    for R in radii:
        grid, tmask, u0 = hitting_probability(gen, target, R, h, outer=0.0)
        _, _, u1 = hitting_probability(gen, target, R, h, outer=1.0)
        win = _window(grid, wr)[None, :] & ~tmask
        deficits[R] = float(1.0 - np.min(u0[win]))
        gaps[R] = float(np.max(np.abs(u1 - u0)[win]))
    d = list(deficits.values())
    limit = aitken(d, noise=1e-12)
    if d[-1] <= hit_tol:
        cls = RECURRENT
    elif limit is not None and limit <= hit_tol:
        cls = RECURRENT
    elif d[-1] >= 10 * hit_tol and len(d) >= 2 and abs(d[-1] - d[-2]) <= 0.1 * d[-1]:
        cls = TRANSIENT
    else:
        cls = INCONCLUSIVE
    return Verdict(cls, deficits, {"hit_tol": hit_tol, "window_radius": wr},
                   {"extrapolated_deficit": limit, "outer_data_gap": gaps,
                    "nondecreasing_in_R": all(b <= a + 1e-12 for a, b in zip(d, d[1:]))})


# ------------------------------------------------------------ certificates

@dataclass
class LyapunovCertificate:
    V: np.ndarray  # grid function, >= 1 on the rows where it is defined
    kappa0: float
    kappa1: float
    K: object
    residual: float
    valid: bool
    scale: float
    grid: Grid
    details: dict = field(default_factory=dict)


def _indicator(region: RegionSpec):
    def f(x, k):
        return region.contains(x, k).astype(float)
    return f


def lyapunov_construct(spec: ProblemSpec, D: RegionSpec, D1: RegionSpec, K: RegionSpec, h,
                       resid_tol: float = RESID_TOL) -> LyapunovCertificate:
    """Certificate ``Ltilde V <= -delta1 V + delta2 1_K`` for the twist by the principal pair of D.

    ``V = Psi_{D1} / Psi_D`` where ``Psi_{D1}`` is the principal eigenfunction
    of the bigger domain with potential ``c - 1_K``. The twisted generator is
    the exact matrix conjugation by ``Psi_D``, so the inequality is checked
    at every row of D with no truncation error.
    """
    grid1 = build_grid(spec, D1, h)
    maskD = np.zeros_like(grid1.interior)
    for k in D.regimes(spec.regimes):
        maskD[k] = region_interior(grid1, D, k)
    gridD = grid1.with_interior(maskD)
    pairD = principal_eigenpair(assemble(spec, gridD))
    pair1 = principal_eigenpair(assemble(spec.add_potential(_indicator(K), -1.0), grid1))
    delta1 = pair1.lam - pairD.lam
    if delta1 <= pair1.width + pairD.width:
        raise GapNonpositive(f"lambda_1 - lambda_D = {delta1:.3e} is not positive",
                             where="stability.lyapunov_construct")
    rows = gridD.row_dof
    psiD = pairD.psi.ravel()
    V = np.zeros(grid1.interior.size)
    V[rows] = pair1.psi.ravel()[rows] / psiD[rows]
    V[rows] /= V[rows].min()
    Vg = V.reshape(grid1.interior.shape)
    Lt = doob_transform(assemble(spec.generator(), gridD, include_potential=False), pairD.psi)
    LV = Lt.apply(Vg)
    Vr = V[rows]
    inK = np.stack([K.contains(grid1.coords, k) for k in range(spec.regimes)]).ravel()[rows]
    delta2 = float(Vr[inK].max()) if inK.any() else 0.0
    excess = LV + delta1 * Vr - delta2 * inK
    residual = float(max(excess.max(), 0.0))
    scale = float(np.max(np.abs(LV)) + delta1 * Vr.max() + delta2)
    return LyapunovCertificate(
        Vg, delta2, delta1, K, residual, residual <= resid_tol * scale, scale, gridD,
        {"lambda_D": pairD.lam, "lambda_1": pair1.lam, "delta1": delta1, "delta2": delta2,
         "brackets": (pairD.bracket, pair1.bracket)})


def exp_stability_test(spec: ProblemSpec, principal: PrincipalLimit, pert: PerturbationSpec,
                       radii: Sequence[float] | None = None, C: float = 1.0,
                       resid_tol: float = RESID_TOL) -> tuple[Verdict, LyapunovCertificate]:
    """Exponential stability of the twisted operator at the principal pair.

    Needs a strict gap ``lambda*(c - h) - lambda*(c)`` above the combined
    uncertainty. Builds ``V = Psi_h / Psi*`` on the largest ball, checks
    ``Ltilde V <= kappa0 1_B - delta V`` with ``2 delta`` equal to the gap
    minus its tolerance, and runs the regularity test on the twisted oracles.
    """
    h = principal.grid.h
    pert_limit = lambda_star(spec.add_potential(pert.bump, -1.0), principal.radii, h, principal.tol)
    gap = pert_limit.lambda_star - principal.lambda_star
    gap_tol = principal.uncertainty + pert_limit.uncertainty
    if gap <= gap_tol:
        raise GapNonpositive(f"gap {gap:.3e} does not exceed its tolerance {gap_tol:.3e}",
                             where="stability.exp_stability_test")
    grid = principal.grid
    rows = grid.row_dof
    psi_s = principal.pair.psi.ravel()
    psi_h = pert_limit.pair.psi.ravel()
    V = np.zeros(grid.interior.size)
    V[rows] = psi_h[rows] / psi_s[rows]
    V[rows] /= V[rows].min()
    Vg = V.reshape(grid.interior.shape)
    Lt = doob_transform(assemble(spec.generator(), grid, include_potential=False), principal.pair.psi)
    LV = Lt.apply(Vg)
    Vr = V[rows]
    delta = 0.5 * (gap - gap_tol)
    finite_gap = pert_limit.pair.lam - principal.pair.lam
    hx = np.stack([np.asarray(pert.bump(grid.coords, k), float) for k in range(spec.regimes)]).ravel()[rows]
    r_nodes = np.linalg.norm(grid.coords[grid.row_node], axis=1)
    hot = hx > finite_gap - delta
    b_radius = float(r_nodes[hot].max() + max(h)) if hot.any() else float(max(h))
    inB = r_nodes <= b_radius
    excess = LV + delta * Vr
    kappa0 = float(max(excess[inB].max(), 0.0))
    residual = float(max((excess - kappa0 * inB).max(), 0.0))
    scale = float(np.max(np.abs(LV)) + delta * Vr.max() + kappa0)
    compact = b_radius < 0.5 * principal.radii[-1]
    valid = residual <= resid_tol * scale and compact
    cert = LyapunovCertificate(Vg, kappa0, delta, Ball(tuple(np.zeros(spec.dim)), b_radius),
                               residual, valid, scale, grid,
                               {"gap": gap, "gap_tol": gap_tol, "finite_radius_gap": finite_gap})
    tp = twist(spec, principal.pair)
    if radii is None:
        radii = [r for r in principal.radii if r < tp.data_radius]
    reg = regularity_test(tp.spec, C, radii, h)
    cls = EXP_STABLE if (valid and reg.classification == REGULAR) else INCONCLUSIVE
    verdict = Verdict(cls, {"gap": gap, "residual": residual},
                      {"gap_tol": gap_tol, "resid_tol": resid_tol * scale, "delta": delta,
                       "kappa0": kappa0, "B_radius": b_radius},
                      {"regularity": reg})
    return verdict, cert
