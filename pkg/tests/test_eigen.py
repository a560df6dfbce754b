import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopeig import problems
from coopeig.discretize import assemble, build_grid
from coopeig.eigen import dense_principal, principal_eigenpair, uniqueness_probe
from coopeig.errors import MetzlerRequired, NotIrreducible
from coopeig.model import Ball, Box, RegionSpec, make_problem
from coopeig.spectrum import concavity_defect

INTERVAL = RegionSpec(Box((-1,), (1,)))


def operator(spec, region=INTERVAL, h=0.01):
    return assemble(spec, build_grid(spec, region, h))


def laplacian(regimes=1, **kw):
    rates = None if regimes == 1 else np.ones((regimes, regimes)) - np.eye(regimes)
    return make_problem(1, regimes, Box((-2,), (2,)), rates=rates, **kw)


@pytest.fixture(scope="module")
def fine_laplacian():
    op = operator(laplacian(), h=1 / 200)
    return op, principal_eigenpair(op)


def test_dirichlet_laplacian(fine_laplacian):
    op, pair = fine_laplacian
    assert abs(pair.lam - np.pi**2 / 4) / (np.pi**2 / 4) <= 1e-3
    x = op.grid.coords[:, 0]
    exact = np.where(np.abs(x) < 1, np.cos(np.pi * x / 2), 0.0)
    assert np.max(np.abs(pair.psi[0] - exact)) <= 1e-3
    # the discrete eigenvalue of the tridiagonal is known in closed form
    h = 1 / 200
    discrete = 4 / h**2 * np.sin(np.pi * h / 4) ** 2
    assert pair.bracket[0] <= discrete <= pair.bracket[1]


def test_pair_invariants(fine_laplacian):
    op, pair = fine_laplacian
    assert pair.converged
    assert np.all(pair.psi_rows > 0)
    lo, hi = pair.bracket
    assert lo <= pair.lam <= hi and hi - lo <= pair.tol
    assert pair.psi[:, pair.normalization_node].min() == 1.0
    assert abs(op.grid.coords[pair.normalization_node, 0]) < 1e-12


@pytest.mark.parametrize("kappa", [-1.0, 0.5, 3.0])
def test_constant_potential_shift(kappa):
    base = principal_eigenpair(operator(laplacian(), h=0.02))
    shifted = principal_eigenpair(operator(laplacian(potential=kappa), h=0.02))
    assert abs(shifted.lam - (base.lam - kappa)) <= base.tol + shifted.tol


def test_symmetric_coupling_reduces():
    one = principal_eigenpair(operator(laplacian(), h=0.01))
    op2 = operator(laplacian(2), h=0.01)
    two = principal_eigenpair(op2)
    assert abs(one.lam - two.lam) <= one.tol + two.tol
    rows = two.grid.interior
    assert np.max(np.abs(two.psi[0] - two.psi[1])[rows[0]]) <= 1e-8
    lam, err = dense_principal(op2)
    assert two.bracket[0] - err <= lam <= two.bracket[1] + err


@pytest.mark.parametrize("spec", [laplacian(2), laplacian()], ids=["coupled", "scalar"])
def test_uniqueness(spec):
    op = operator(spec, h=0.02)
    pair = principal_eigenpair(op)
    rep = uniqueness_probe(op, pair, trials=5)
    assert rep.passed and rep.max_deviation <= 1e-6


def test_reducible_rates_rejected():
    spec = problems.reducible_example()
    with pytest.raises(NotIrreducible):
        principal_eigenpair(operator(spec, RegionSpec(Ball((0,), 4.0)), h=0.1))


def test_non_metzler_rejected():
    spec = make_problem(2, 1, Box((-2, -2), (2, 2)), diffusion=np.array([[1.0, 1.2], [1.2, 2.0]]))
    op = operator(spec, RegionSpec(Ball((0, 0), 1.0)), h=0.25)
    with pytest.raises(MetzlerRequired):
        principal_eigenpair(op)


def random_problem(rng, regimes=2):
    s = rng.uniform(0.2, 1.0, 6)
    R = rng.uniform(0.2, 2.0, (regimes, regimes)) * (1 - np.eye(regimes))
    return make_problem(
        1, regimes, Box((-3,), (3,)),
        diffusion=lambda x, k: 1 + s[0] * np.sin(x[:, 0] + k) ** 2,
        drift=lambda x, k: s[1] * np.sin(2 * x[:, 0]) - s[2] * k * x[:, 0],
        potential=lambda x, k: s[3] * np.cos(x[:, 0] * (k + 1)),
        rates=lambda x, i, j: R[i, j] * (1 + s[4] * np.tanh(x[:, 0])) * np.ones(len(x)),
    )


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bracket_contains_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    op = operator(random_problem(rng), RegionSpec(Ball((0,), 1.5)), h=0.02)
    assert op.n <= 400
    pair = principal_eigenpair(op)
    lam, err = dense_principal(op)
    assert pair.width <= pair.tol
    assert pair.bracket[0] - err <= lam <= pair.bracket[1] + err


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_potential_monotonicity(seed):
    rng = np.random.default_rng(seed)
    spec = random_problem(rng)
    center, width, height = rng.uniform(-1, 1), rng.uniform(0.1, 0.5), rng.uniform(0.1, 2.0)
    bump = lambda x, k: height * np.maximum(0.0, 1 - ((x[:, 0] - center) / width) ** 2)
    region = RegionSpec(Ball((0,), 2.0))
    lo = principal_eigenpair(operator(spec, region, 0.02))
    hi = principal_eigenpair(operator(spec.add_potential(bump), region, 0.02))
    assert lo.lam - hi.lam > lo.tol + hi.tol


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_domain_monotonicity(seed):
    rng = np.random.default_rng(seed)
    spec = random_problem(rng)
    r1 = rng.uniform(0.8, 1.6)
    r2 = r1 + rng.uniform(0.1, 1.0)
    small = principal_eigenpair(operator(spec, RegionSpec(Ball((0,), r1)), 0.05))
    big = principal_eigenpair(operator(spec, RegionSpec(Ball((0,), r2)), 0.05))
    if big.grid.n_rows == small.grid.n_rows:
        pytest.skip("radii rasterize to the same domain")
    assert small.lam - big.lam > small.tol + big.tol


@pytest.mark.parametrize("seed", [1, 2])
def test_concavity_in_potential(seed):
    rng = np.random.default_rng(seed)
    spec = random_problem(rng)
    c1 = lambda x, k: rng_c1[k] * np.exp(-x[:, 0] ** 2)
    c2 = lambda x, k: rng_c2[k] * np.sin(x[:, 0])
    rng_c1, rng_c2 = rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2)
    region = RegionSpec(Ball((0,), 2.0))
    thetas = [0.0, 0.25, 0.5, 0.75, 1.0]
    lams, tols = [], []
    for t in thetas:
        mix = spec.with_potential(lambda x, k, t=t: t * c1(x, k) + (1 - t) * c2(x, k))
        p = principal_eigenpair(operator(mix, region, 0.02))
        lams.append(p.lam)
        tols.append(p.tol)
    assert concavity_defect(thetas, lams) <= 2 * max(tols)
