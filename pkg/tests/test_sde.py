import csv
from dataclasses import replace

import numpy as np
import pytest

from coopeig import problems
from coopeig.discretize import build_grid
from coopeig.errors import CensoringTooHigh, RateBoundExceeded
from coopeig.model import Ball, RegionSpec, ball, make_problem
from coopeig.sde import (CENSORED, EXPLODED, HIT, Hit, SimConfig, Terminal, feynman_kac_check,
                         hitting_representation_check, risk_sensitive_cost, simulate, twisted_simulate,
                         write_paths_csv)
from coopeig.spectrum import lambda_star
from coopeig.twist import twist

WIDE = problems.window(1e3)


def coupled_free(rate=1.0):
    return make_problem(1, 2, WIDE, rates=[[0, rate], [rate, 0]])


def test_brownian_variance():
    tb = simulate(make_problem(1, 1, WIDE), SimConfig(dt=0.01, n_paths=20_000, seed=1), Terminal(1.0), [0.0])
    v = tb.x[:, 0]
    se = 2.0 * np.sqrt(2.0 / len(v))
    assert abs(v.var() - 2.0) <= 4 * se
    assert abs(v.mean()) <= 4 * np.sqrt(2.0 / len(v))
    assert np.all(tb.status == CENSORED) and np.all(tb.t_end == 1.0)


def test_two_dimensional_covariance():
    a = np.array([[1.0, 0.5], [0.5, 2.0]])
    spec = make_problem(2, 1, problems.window(1e3, 2), diffusion=a)
    tb = simulate(spec, SimConfig(dt=0.05, n_paths=20_000, seed=2), Terminal(1.0), [0.0, 0.0])
    np.testing.assert_allclose(np.cov(tb.x.T), 2 * a, atol=0.1)


def test_occupation_and_jump_rates():
    T = 10.0
    tb = simulate(coupled_free(), SimConfig(dt=0.01, n_paths=5_000, seed=3), Terminal(T), [0.0], k0=0)
    frac = tb.occupation[:, 0] / T
    # started in regime 0: E[time in 0] / T = 1/2 + (1 - exp(-2T)) / (4T)
    expected = 0.5 + (1 - np.exp(-2 * T)) / (4 * T)
    se = frac.std(ddof=1) / np.sqrt(len(frac))
    assert abs(frac.mean() - expected) <= 4 * se
    np.testing.assert_allclose(tb.occupation.sum(axis=1), T, rtol=1e-9)
    rates = tb.jump_rates()
    n_jumps = tb.jump_counts.sum()
    assert rates[0, 1] == pytest.approx(1.0, abs=4 / np.sqrt(n_jumps / 2))
    assert rates[1, 0] == pytest.approx(1.0, abs=4 / np.sqrt(n_jumps / 2))


def test_twisted_jump_ratio():
    spec = problems.free_coupled(half_width=20)
    grid = build_grid(spec, RegionSpec(ball(15.0)), 0.1)
    psi = np.stack([np.ones(grid.n_nodes), 2 * np.ones(grid.n_nodes)]) * grid.interior
    tp = twist(spec, (psi, 0.0), grid)
    tb = twisted_simulate(tp, SimConfig(dt=0.01, n_paths=2_000, seed=4), Terminal(5.0), [0.0])
    rates = tb.jump_rates()
    assert rates[0, 1] == pytest.approx(2.0, rel=0.08)
    assert rates[1, 0] == pytest.approx(0.5, rel=0.08)
    assert rates[0, 1] / rates[1, 0] == pytest.approx(4.0, rel=0.12)


def test_thread_count_does_not_change_results():
    spec = problems.bounded_fk()
    base = SimConfig(dt=0.01, n_paths=3_000, seed=5, block_size=700)
    runs = [simulate(spec, replace(base, threads=t), Terminal(2.0), [0.5]) for t in (1, 3)]
    for name in ("x", "s", "status", "t_end", "log_functional", "occupation", "jump_counts"):
        assert getattr(runs[0], name).tobytes() == getattr(runs[1], name).tobytes(), name


def test_seed_changes_results():
    spec = problems.bounded_fk()
    a = simulate(spec, SimConfig(dt=0.01, n_paths=100, seed=1), Terminal(1.0), [0.0])
    b = simulate(spec, SimConfig(dt=0.01, n_paths=100, seed=2), Terminal(1.0), [0.0])
    assert not np.array_equal(a.x, b.x)


def test_status_accounting():
    spec = problems.outward()
    cfg = SimConfig(dt=0.01, t_max=3.0, n_paths=2_000, seed=6, cap_radius=4.0)
    tb = simulate(spec, cfg, Hit(RegionSpec(ball(0.5))), [1.0])
    assert tb.n_hit + tb.n_exploded + tb.n_censored == tb.n_paths
    assert tb.n_hit > 0 and tb.n_exploded > 0 and tb.n_censored > 0
    r = np.abs(tb.x[:, 0])
    assert np.all(r[tb.status == EXPLODED] > 4.0)
    assert np.all(r[tb.status == HIT] <= 0.5)
    assert np.all(tb.t_end[tb.status == CENSORED] == pytest.approx(3.0))


def test_start_inside_target_hits_at_zero():
    tb = simulate(problems.ou(), SimConfig(dt=0.01, n_paths=10), Hit(RegionSpec(ball(1.0))), [0.0])
    assert np.all(tb.status == HIT) and np.all(tb.t_end == 0.0)


def test_rate_bound():
    with pytest.raises(RateBoundExceeded):
        simulate(coupled_free(rate=200.0), SimConfig(dt=1e-3, n_paths=10), Terminal(0.1), [0.0])


@pytest.mark.parametrize("kappa", [0.0, 0.7, -1.3])
def test_constant_potential_cost(kappa):
    spec = make_problem(1, 2, WIDE, potential=kappa, rates=[[0, 1], [1, 0]])
    cfg = SimConfig(dt=0.01, n_paths=500, seed=7)
    tb = simulate(spec, cfg, Terminal(2.0), [0.0])
    np.testing.assert_allclose(tb.log_functional, 2.0 * kappa, atol=1e-12)
    cost = risk_sensitive_cost(spec, cfg, [0.0], 0, [1.0, 2.0])
    assert cost.estimate == pytest.approx([kappa, kappa], abs=1e-12)
    assert cost.slope == pytest.approx(kappa, abs=1e-10)


def test_risk_sensitive_growth_rate_sign():
    spec = problems.ou(bump=1.0)
    lim = lambda_star(spec, [4, 8, 16], 0.05)
    cost = risk_sensitive_cost(spec, SimConfig(dt=0.01, n_paths=4_000, seed=8), [0.0], 0,
                               [5.0, 10.0, 20.0], lambda_star=lim.lambda_star)
    assert cost.matches == "-lambda*"
    assert abs(cost.slope + lim.lambda_star) <= max(4 * cost.slope_se, 0.05)


def test_feynman_kac_trivial_sides():
    spec = problems.free_coupled(half_width=50)
    grid = build_grid(spec, RegionSpec(ball(30.0)), 0.1)
    ones = grid.interior.astype(float)
    tp = twist(spec, (ones, 0.0), grid)

    class Pair:
        psi, lam = ones, 0.0
    Pair.grid = grid

    cfg = SimConfig(dt=0.01, n_paths=2_000, seed=9)
    zero = feynman_kac_check(spec, Pair, tp, lambda x, k: np.zeros(len(x)), 1.0, cfg, [0.0])
    assert zero.lhs == zero.rhs == 0.0 and zero.passed
    g = lambda x, k: np.exp(-x[:, 0] ** 2) * (1 + k)
    rep = feynman_kac_check(spec, Pair, tp, g, 1.0, cfg, [0.0])
    assert rep.passed and abs(rep.z) <= 3


def test_feynman_kac_small():
    spec = problems.bounded_fk()
    lim = lambda_star(spec, [4, 8, 16], 0.05)
    tp = twist(spec, lim.pair)
    g = lambda x, k: 1.0 / (1.0 + x[:, 0] ** 2)
    cfg = SimConfig(dt=1e-2, n_paths=4_000, seed=10, cap_radius=16.0)
    rep = feynman_kac_check(spec, lim.pair, tp, g, 1.0, cfg, [0.0])
    assert abs(rep.z) <= 3
    assert rep.exploded == (0, 0)


def test_paths_csv(tmp_path):
    cfg = SimConfig(dt=0.1, n_paths=5, seed=11, dump_paths=3)
    tb = simulate(coupled_free(), cfg, Terminal(1.0), [0.0])
    out = tmp_path / "paths.csv"
    write_paths_csv(tb, out)
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["path", "t", "x1", "regime"]
    body = rows[1:]
    assert len(body) == 3 * 11
    assert {r[0] for r in body} == {"0", "1", "2"}
    assert {r[3] for r in body} <= {"1", "2"}
    assert body[0][1] == "0.0" and body[0][3] == "1"
    with pytest.raises(ValueError):
        write_paths_csv(simulate(coupled_free(), replace(cfg, dump_paths=0), Terminal(1.0), [0.0]), out)


def test_reducible_example_hitting_fractions():
    spec = problems.reducible_example()
    cfg = SimConfig(dt=0.01, t_max=30.0, n_paths=2_000, seed=12)
    regime1 = simulate(spec, cfg, Hit(RegionSpec(ball(1.0), {0})), [3.0], k0=0)
    every = simulate(spec, cfg, Hit(RegionSpec(ball(1.0))), [3.0], k0=0)
    assert regime1.n_hit / regime1.n_paths < 0.5
    assert every.n_hit / every.n_paths >= 0.99


def test_ou_hits_ball():
    tb = simulate(problems.ou(regimes=2), SimConfig(dt=0.01, t_max=20.0, n_paths=2_000, seed=13),
                  Hit(RegionSpec(ball(1.0))), [2.0])
    assert tb.n_hit / tb.n_paths >= 0.999


def test_hitting_representation_small():
    spec = problems.ou(bump=1.0)
    lim = lambda_star(spec, [4, 8, 16], 0.05)
    cfg = SimConfig(dt=1e-3, t_max=20.0, n_paths=5_000, seed=14)
    rep = hitting_representation_check(spec, lim, RegionSpec(ball(1.0)), cfg, [2.0])
    assert rep.passed
    assert rep.deviation <= max(3 * rep.se / rep.psi_star, 0.05)
    assert rep.censored_fraction <= 0.01


def test_outward_censoring_reported():
    spec = problems.outward(regimes=1)
    lim = lambda_star(spec, [4, 8], 0.05)
    cfg = SimConfig(dt=0.01, t_max=5.0, n_paths=500, seed=15)
    with pytest.raises(CensoringTooHigh) as info:
        hitting_representation_check(spec, lim, RegionSpec(ball(1.0)), cfg, [2.0])
    assert info.value.partial.censored_fraction > 0.01
