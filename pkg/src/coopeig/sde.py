"""Monte Carlo for the regime-switching diffusion and its twisted version.

Euler-Maruyama in ``X`` with regime-frozen coefficients. Regime switching uses
a hazard clock: each path carries an ``Exp(1)`` threshold and accumulates
``q(X) dt`` (total outgoing rate at the pre-step point); a jump fires at the
first step where the sum crosses the threshold. Conditional on no earlier
jump this happens with probability ``1 - exp(-q dt)``, so it is the usual
per-step switching rule with pre-drawn randomness.

Paths are simulated in fixed-size blocks, each with its own counter-based
streams keyed by ``(seed, stream, block)``; results do not depend on how
many threads run the blocks.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp

from .discretize import Grid
from .errors import CensoringTooHigh, EffectiveSampleCollapse, RateBoundExceeded
from .model import ProblemSpec, RegionSpec

ACTIVE, HIT, EXPLODED, CENSORED = 0, 1, 2, 3
JUMP_CHUNK = 16


def default_threads() -> int:
    return max(1, int(os.environ.get("COOPEIG_THREADS", "1")))


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_max: float = 50.0
    n_paths: int = 10_000
    seed: int = 0
    cap_radius: float = 1e3
    block_size: int = 8192
    threads: int | None = None
    substeps: int = 1  # Brownian increments drawn per step; 2 couples a run with its dt/2 twin
    rate_bound: float = 0.1
    dump_paths: int = 0
    exit_radii: tuple = ()

    def __post_init__(self):
        if self.dt <= 0 or self.t_max <= 0 or self.n_paths <= 0 or self.substeps < 1:
            raise ValueError("dt, t_max, n_paths and substeps must be positive")

    def coupled_pair(self) -> tuple["SimConfig", "SimConfig"]:
        """``(dt, dt/2)`` configs driven by the same Brownian increments and jump clocks."""
        return replace(self, substeps=2 * self.substeps), replace(self, dt=self.dt / 2)


@dataclass(frozen=True)
class Terminal:
    T: float


@dataclass(frozen=True)
class Hit:
    target: RegionSpec


@dataclass
class TrajectoryBatch:
    x: np.ndarray  # (n, d) state at the stopping time (T, hit, explosion or censoring)
    s: np.ndarray  # (n,)
    status: np.ndarray  # (n,) HIT / EXPLODED / CENSORED
    t_end: np.ndarray
    log_functional: np.ndarray  # int_0^{t_end} (c + lam) dt
    occupation: np.ndarray  # (n, N) time spent per regime
    jump_counts: np.ndarray  # (N, N) total i -> j jumps
    exit_times: np.ndarray  # (n, len(exit_radii)), inf when never crossed
    dt: float
    n_steps: int
    paths: list = field(default_factory=list, repr=False)

    @property
    def n_paths(self) -> int:
        return len(self.s)

    @property
    def n_hit(self) -> int:
        return int(np.sum(self.status == HIT))

    @property
    def n_exploded(self) -> int:
        return int(np.sum(self.status == EXPLODED))

    @property
    def n_censored(self) -> int:
        return int(np.sum(self.status == CENSORED))

    def jump_rates(self) -> np.ndarray:
        """Empirical ``i -> j`` rates: jump counts over total time spent in ``i``."""
        occ = self.occupation.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.jump_counts / occ[:, None]


def _sqrt2a(A: np.ndarray) -> np.ndarray:
    """Symmetric square root of ``2 a`` for a stack of matrices."""
    if A.shape[-1] == 1:
        return np.sqrt(2.0 * A)
    w, U = np.linalg.eigh(2.0 * A)
    return np.einsum("nij,nj,nkj->nik", U, np.sqrt(np.clip(w, 0.0, None)), U)


def _streams(cfg: SimConfig, stream: int, block: int):
    def gen(kind):
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, stream, block, kind])))
    return gen(0), gen(1)


def _run_block(spec: ProblemSpec, cfg: SimConfig, functional, x0, k0, lam: float, stream: int,
               block: int, n: int, use_potential: bool) -> TrajectoryBatch:
    d, N = spec.dim, spec.regimes
    rng_w, rng_j = _streams(cfg, stream, block)
    E = rng_j.exponential(size=(n, JUMP_CHUNK))
    U = rng_j.random(size=(n, JUMP_CHUNK))
    ptr = np.zeros(n, dtype=np.int64)
    e_cur = E[:, 0].copy()

    x = np.array(np.broadcast_to(x0, (n, d)), dtype=float)
    s = np.array(np.broadcast_to(k0, (n,)), dtype=np.int64)
    status = np.zeros(n, dtype=np.int8)
    t_end = np.zeros(n)
    logw = np.zeros(n)
    occ = np.zeros((N, n))
    jumps = np.zeros((N, N), dtype=np.int64)
    H = np.zeros(n)
    radii = np.asarray(cfg.exit_radii, dtype=float)
    exit_t = np.full((n, len(radii)), np.inf)
    dump = min(cfg.dump_paths, n) if block == 0 else 0
    paths = [[(0.0, *x[i], s[i])] for i in range(dump)]

    if isinstance(functional, Terminal):
        n_steps = int(round(functional.T / cfg.dt))
        target = None
    else:
        n_steps = int(round(cfg.t_max / cfg.dt))
        target = functional.target
    dt = cfg.dt
    sub_scale = np.sqrt(dt / cfg.substeps)
    all_rows = np.arange(n)

    def check_stops(idx, t_now):
        xi, si = x[idx], s[idx]
        r = np.sqrt(np.sum(xi * xi, axis=1))
        if len(radii):
            crossed = (r[:, None] >= radii[None, :]) & np.isinf(exit_t[idx])
            exit_t[idx] = np.where(crossed, t_now, exit_t[idx])
        stop = r > cfg.cap_radius
        new = np.where(stop, EXPLODED, ACTIVE).astype(np.int8)
        if target is not None:
            inside = np.zeros(len(r), dtype=bool)
            for k in range(N):
                sel = si == k
                if sel.any():
                    inside[sel] = target.contains(xi[sel], k)
            new[inside & ~stop] = HIT
            stop |= inside
        if stop.any():
            status[idx] = new
            t_end[idx] = np.where(stop, t_now, t_end[idx])
        return bool(stop.any())

    check_stops(all_rows, 0.0)
    idx = np.flatnonzero(status == ACTIVE)
    for step in range(1, n_steps + 1):
        dW = rng_w.standard_normal((n, d))
        for _ in range(cfg.substeps - 1):
            dW += rng_w.standard_normal((n, d))
        if len(idx) == 0:
            break
        # plain slices while every path is alive keep the hot loop free of gathers
        ix = slice(None) if len(idx) == n else idx
        xa, sa = x[ix], s[ix]
        m = len(idx)
        b = np.empty((m, d))
        sig = np.empty((m, d, d))
        c = np.zeros(m)
        R = np.zeros((m, N))
        masks = [sa == k for k in range(N)] if N > 1 else [None]
        for k in range(N):
            sel = masks[k]
            if sel is None:
                xk = xa
                sel = slice(None)
            else:
                if not sel.any():
                    continue
                xk = xa[sel]
            b[sel] = spec.b(xk, k)
            sig[sel] = _sqrt2a(spec.a(xk, k))
            if use_potential:
                c[sel] = spec.c(xk, k)
            for j in range(N):
                if j != k:
                    R[sel, j] = spec.m(xk, k, j)
        q = R.sum(axis=1)
        if N > 1 and q.max(initial=0.0) * dt > cfg.rate_bound:
            i = int(np.argmax(q))
            raise RateBoundExceeded(
                f"dt*rate = {q[i] * dt:.3g} > {cfg.rate_bound} at x={xa[i]}, regime {sa[i]}",
                where="sde.simulate")
        logw[ix] += (c + lam) * dt
        if N > 1:
            for k in range(N):
                occ[k, ix] += masks[k] * dt
        else:
            occ[0, ix] += dt
        if d == 1:
            x[ix] = xa + b * dt + sig[:, :, 0] * (dW[ix] * sub_scale)
        else:
            x[ix] = xa + b * dt + np.einsum("nij,nj->ni", sig, dW[ix] * sub_scale)

        if N > 1:
            Hn = H[ix] + q * dt
            H[ix] = Hn
            fire = Hn >= e_cur[ix]
            if fire.any():
                f = idx[fire]
                u = U[f, ptr[f]] * q[fire]
                Rf = R[fire]
                cum = np.cumsum(Rf, axis=1)
                dest = np.minimum(np.sum(cum <= u[:, None], axis=1), N - 1)
                # never land on a zero-rate regime through rounding at the top end
                zero = Rf[np.arange(len(f)), dest] <= 0
                if zero.any():
                    dest[zero] = np.argmax(Rf[zero], axis=1)
                np.add.at(jumps, (s[f], dest), 1)
                s[f] = dest
                H[f] = 0.0
                ptr[f] += 1
                if ptr[f].max() >= E.shape[1]:
                    E = np.concatenate([E, rng_j.exponential(size=(n, JUMP_CHUNK))], axis=1)
                    U = np.concatenate([U, rng_j.random(size=(n, JUMP_CHUNK))], axis=1)
                e_cur[f] = E[f, ptr[f]]

        t_now = step * dt
        if check_stops(idx, t_now):
            idx = np.flatnonzero(status == ACTIVE)
        for i in range(dump):
            if status[i] == ACTIVE or t_end[i] == t_now:
                paths[i].append((t_now, *x[i], s[i]))
    left = status == ACTIVE
    status[left] = CENSORED
    t_end[left] = n_steps * dt
    return TrajectoryBatch(x, s, status, t_end, logw, occ.T.copy(), jumps, exit_t, dt, n_steps,
                           [np.array(p) for p in paths])


def _merge(parts: list[TrajectoryBatch]) -> TrajectoryBatch:
    first = parts[0]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return TrajectoryBatch(cat("x"), cat("s"), cat("status"), cat("t_end"), cat("log_functional"),
                           cat("occupation"), sum(p.jump_counts for p in parts), cat("exit_times"),
                           first.dt, max(p.n_steps for p in parts), first.paths)


def simulate(spec: ProblemSpec, cfg: SimConfig, functional, x0, k0: int = 0, lam: float = 0.0,
             stream: int = 0, use_potential: bool = True) -> TrajectoryBatch:
    """Simulate ``cfg.n_paths`` paths from ``(x0, k0)`` (0-based regime).

    ``functional`` is :class:`Terminal` (stop at ``T``) or :class:`Hit`
    (stop on entering the target, censor at ``t_max``). The log functional
    accumulates ``(c + lam) dt`` with left-point values.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape[-1] != spec.dim:
        raise ValueError(f"start point has dimension {x0.shape[-1]}, problem has {spec.dim}")
    sizes = []
    left = cfg.n_paths
    while left > 0:
        sizes.append(min(cfg.block_size, left))
        left -= sizes[-1]
    threads = cfg.threads or default_threads()

    def job(b):
        return _run_block(spec, cfg, functional, x0, k0, lam, stream, b, sizes[b], use_potential)

    if threads == 1 or len(sizes) == 1:
        parts = [job(b) for b in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    return _merge(parts)


def twisted_simulate(tp, cfg: SimConfig, functional, x0, k0: int = 0, stream: int = 1) -> TrajectoryBatch:
    """Simulate the twisted process; paths leaving the Psi data region count as exploded."""
    cap = min(cfg.cap_radius, tp.data_radius)
    return simulate(tp.spec, replace(cfg, cap_radius=cap), functional, x0, k0, 0.0, stream,
                    use_potential=False)


def write_paths_csv(batch: TrajectoryBatch, path) -> None:
    """Dump recorded paths with columns ``path, t, x1..xd, regime`` (regime 1-based)."""
    if not batch.paths:
        raise ValueError("no paths recorded; set SimConfig.dump_paths")
    d = batch.x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t"] + [f"x{i + 1}" for i in range(d)] + ["regime"])
        for p, rec in enumerate(batch.paths):
            for row in rec:
                w.writerow([p, repr(float(row[0]))] + [repr(float(v)) for v in row[1:-1]] + [int(row[-1]) + 1])


# ---------------------------------------------------------------- grid data

def grid_interpolator(grid: Grid, values) -> Callable:
    """Multilinear interpolant ``f(x, k)`` of a grid function; zero outside the lattice box."""
    G = grid.as_grid_function(values)
    axes = grid.axes()
    fns = [RegularGridInterpolator(axes, G[k].reshape(grid.shape), method="linear",
                                   bounds_error=False, fill_value=0.0) for k in range(grid.regimes)]

    def f(x, k):
        return fns[k](np.atleast_2d(x))
    return f


def _eval_regimes(fn, x, s, N) -> np.ndarray:
    out = np.zeros(len(s))
    for k in range(N):
        sel = s == k
        if sel.any():
            out[sel] = fn(x[sel], k)
    return out


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


# ------------------------------------------------------------- estimators

@dataclass
class CostEstimate:
    T: list
    estimate: list
    se: list
    slope: float  # least-squares growth rate of T * estimate against T
    slope_se: float
    matches: str | None  # "+lambda*", "-lambda*" or None
    max_weight_fraction: list


def risk_sensitive_cost(spec: ProblemSpec, cfg: SimConfig, x, k: int, T_list: Sequence[float],
                        lambda_star: float | None = None, n_batches: int = 20,
                        collapse: float = 0.99) -> CostEstimate:
    """``(1/T) log E exp(int_0^T c dt)`` for each horizon, log-sum-exp over paths.

    Standard errors come from batch means over ``n_batches`` groups of paths.
    When ``lambda_star`` is given the growth rate is compared against both
    ``+lambda_star`` and ``-lambda_star`` and the closer one is recorded.
    """
    ests, ses, fracs = [], [], []
    for T in T_list:
        tb = simulate(spec, cfg, Terminal(T), x, k)
        lw = np.where(tb.status == EXPLODED, -np.inf, tb.log_functional)
        total = logsumexp(lw)
        frac = float(np.exp(lw.max() - total))
        fracs.append(frac)
        if frac > collapse and len(lw) > 1:
            raise EffectiveSampleCollapse(f"one path carries {frac:.3f} of the weight at T={T}",
                                          where="sde.risk_sensitive_cost")
        est = (total - np.log(len(lw))) / T
        groups = np.array_split(lw, n_batches)
        bm = np.array([(logsumexp(g) - np.log(len(g))) / T for g in groups])
        ests.append(float(est))
        ses.append(float(bm.std(ddof=1) / np.sqrt(len(bm))))
    Ts = np.asarray(T_list, float)
    y = Ts * np.asarray(ests)
    if len(Ts) >= 2:
        A = np.vstack([Ts, np.ones_like(Ts)]).T
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        slope = float(coef[0])
        w = np.asarray(ses) * Ts
        slope_se = float(np.sqrt(np.sum(w ** 2)) / np.ptp(Ts))
    else:
        slope, slope_se = float(ests[0]), float(ses[0])
    matches = None
    if lambda_star is not None:
        matches = "-lambda*" if abs(slope + lambda_star) <= abs(slope - lambda_star) else "+lambda*"
    return CostEstimate(list(T_list), ests, ses, slope, slope_se, matches, fracs)


@dataclass
class FKReport:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    z: float
    lhs_halved: float
    rhs_halved: float
    lhs_shift: float
    rhs_shift: float
    passed: bool
    exploded: tuple  # (base, twisted)


def feynman_kac_check(spec: ProblemSpec, pair, tp, g: Callable, T: float, cfg: SimConfig, x0,
                      k0: int = 0, z_max: float = 3.0) -> FKReport:
    """Compare ``E[exp(int (c+lam)) g Psi(X_T)]`` with ``Psi(x0) E~[g(X~_T); T < explosion]``.

    ``pair`` is an eigenpair with ``psi``, ``lam`` and ``grid``. Base and
    twisted runs use independent streams. Each side is re-estimated at
    ``dt/2`` with coupled noise; the check passes when ``|z| <= z_max`` and
    both halving shifts stay below one standard error.
    """
    psi_f = grid_interpolator(pair.grid, pair.psi)
    N = spec.regimes
    x0 = np.atleast_1d(np.asarray(x0, float))
    psi0 = float(psi_f(x0[None, :], k0)[0])

    def lhs_samples(c):
        tb = simulate(spec, c, Terminal(T), x0, k0, pair.lam, stream=0)
        ok = tb.status != EXPLODED
        v = np.zeros(tb.n_paths)
        v[ok] = (np.exp(tb.log_functional[ok]) * _eval_regimes(g, tb.x[ok], tb.s[ok], N)
                 * _eval_regimes(psi_f, tb.x[ok], tb.s[ok], N))
        return v, tb.n_exploded

    def rhs_samples(c):
        tb = twisted_simulate(tp, c, Terminal(T), x0, k0, stream=1)
        ok = tb.status != EXPLODED
        v = np.zeros(tb.n_paths)
        v[ok] = psi0 * _eval_regimes(g, tb.x[ok], tb.s[ok], N)
        return v, tb.n_exploded

    coarse, fine = cfg.coupled_pair()
    lv, lex = lhs_samples(coarse)
    rv, rex = rhs_samples(coarse)
    lv2, _ = lhs_samples(fine)
    rv2, _ = rhs_samples(fine)
    lhs, lse = _mean_se(lv)
    rhs, rse = _mean_se(rv)
    lhs2, _ = _mean_se(lv2)
    rhs2, _ = _mean_se(rv2)
    se = np.hypot(lse, rse)
    z = 0.0 if se == 0 else (lhs - rhs) / se
    ls, rs = abs(lhs2 - lhs), abs(rhs2 - rhs)
    passed = abs(z) <= z_max and ls <= max(lse, 1e-15) and rs <= max(rse, 1e-15)
    return FKReport(lhs, lse, rhs, rse, float(z), lhs2, rhs2, ls, rs, bool(passed), (lex, rex))


@dataclass
class HittingReport:
    estimate: float
    se: float
    psi_star: float
    deviation: float  # relative
    censored_fraction: float
    exploded_fraction: float
    halved_estimate: float | None
    passed: bool


def hitting_representation_check(spec: ProblemSpec, principal, target: RegionSpec, cfg: SimConfig,
                                 x0, k0: int = 0, rel_tol: float = 0.05, max_censored: float = 0.01,
                                 halving: bool = False, strict: bool = True) -> HittingReport:
    """Estimate ``E[exp(int_0^tau (c + lambda*)) Psi*(X_tau); tau < inf]`` and compare with ``Psi*(x0)``.

    ``tau`` is the first entry into ``target``; exploded and censored paths
    contribute zero. Raises :class:`CensoringTooHigh` (with the report as
    ``partial``) when more than ``max_censored`` of the paths reach ``t_max``
    and ``strict`` is set.
    """
    psi_f = grid_interpolator(principal.grid, principal.psi_star)
    N = spec.regimes
    x0 = np.atleast_1d(np.asarray(x0, float))
    psi0 = float(psi_f(x0[None, :], k0)[0])
    lam = principal.lambda_star

    def run(c):
        tb = simulate(spec, c, Hit(target), x0, k0, lam)
        hit = tb.status == HIT
        v = np.zeros(tb.n_paths)
        v[hit] = np.exp(tb.log_functional[hit]) * _eval_regimes(psi_f, tb.x[hit], tb.s[hit], N)
        return v, tb

    coarse, fine = cfg.coupled_pair() if halving else (cfg, None)
    v, tb = run(coarse)
    est, se = _mean_se(v)
    half = _mean_se(run(fine)[0])[0] if fine is not None else None
    dev = abs(est - psi0) / abs(psi0)
    cens = tb.n_censored / tb.n_paths
    passed = dev <= max(3 * se / abs(psi0), rel_tol) and cens <= max_censored
    rep = HittingReport(est, se, psi0, float(dev), float(cens), tb.n_exploded / tb.n_paths, half, bool(passed))
    if strict and cens > max_censored:
        raise CensoringTooHigh(f"{cens:.3%} of paths censored at t_max={cfg.t_max}",
                               where="sde.hitting_representation_check", partial=rep)
    return rep
