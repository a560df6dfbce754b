from dataclasses import replace

import numpy as np
import pytest

from coopeig import problems, stability
from coopeig.errors import GapNonpositive
from coopeig.model import Ball, Box, RegionSpec, ball
from coopeig.spectrum import eigenfunction_at, lambda_star
from coopeig.stability import (EXP_STABLE, INCONCLUSIVE, RECURRENT, REGULAR, TRANSIENT, exp_stability_test,
                               lyapunov_construct, recurrence_test, regularity_test)
from coopeig.twist import twist

H = 0.05
B1 = RegionSpec(ball(1.0))


def test_ou_regular():
    v = regularity_test(problems.ou().generator(), C=1.0, radii=(4, 8, 16), h=H)
    assert v.classification == REGULAR
    values = list(v.evidence.values())
    assert values[-1] <= stability.REG_TOL
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_free_coupled_regular():
    v = regularity_test(problems.free_coupled(half_width=40).generator(), C=1.0, radii=(4, 8, 16), h=H)
    assert v.classification == REGULAR


def test_ou_recurrent():
    v = recurrence_test(problems.ou(regimes=2).generator(), B1, radii=(8, 16, 32), h=H)
    assert v.classification == RECURRENT
    assert list(v.evidence.values())[-1] <= stability.HIT_TOL


def test_outward_transient():
    v = recurrence_test(problems.outward().generator(), B1, radii=(8, 16, 32), h=H)
    assert v.classification == TRANSIENT
    # hitting probability settles below 0.9
    assert list(v.evidence.values())[-1] > 0.1
    assert v.details["nondecreasing_in_R"]


def test_outward_scale_function_oracle():
    # scalar case: P(hit [-1, 1] from x before R) = (S(R) - S(x)) / (S(R) - S(1)) with S' = exp(-int b)
    spec = problems.outward(regimes=1).generator()
    R, x0 = 16.0, 3.0
    grid, _, u = stability.hitting_probability(spec, B1, R, 0.01)
    s = np.linspace(1.0, R, 200001)
    b_int = np.cumsum(2 * np.tanh(10 * s)) * (s[1] - s[0])
    S = np.concatenate([[0.0], np.cumsum(np.exp(-b_int[:-1])) * (s[1] - s[0])])
    Sx = np.interp(x0, s, S)
    exact = (S[-1] - Sx) / (S[-1] - S[0])
    node = grid.nearest_node([x0])
    assert u[0, node] == pytest.approx(exact, abs=0.02)


def test_reducible_example_targets():
    gen = problems.reducible_example().generator()
    one = recurrence_test(gen, RegionSpec(ball(1.0), {0}), radii=(8, 16, 32), h=H)
    both = recurrence_test(gen, B1, radii=(8, 16, 32), h=H)
    assert one.classification == TRANSIENT
    assert both.classification == RECURRENT


def test_twisted_below_limit_transient():
    spec = problems.free_coupled(half_width=80)
    lim = lambda_star(spec, [4, 8, 16, 32], H)
    ef = eigenfunction_at(spec, lim.lambda_star - 1.0, [64], H)
    tp = twist(spec, ef)
    radii = [R for R in (8, 16, 32) if R < tp.data_radius]
    v = recurrence_test(tp.spec, B1, radii, H)
    assert v.classification == TRANSIENT


def test_twisted_at_limit_recurrent():
    spec = problems.free_coupled(half_width=80)
    lim = lambda_star(spec, [4, 8, 16, 32, 64], H)
    tp = twist(spec, lim.pair)
    radii = [R for R in (8, 16, 32) if R < tp.data_radius]
    v = recurrence_test(tp.spec, B1, radii, H)
    assert v.classification == RECURRENT


BOX = lambda a: RegionSpec(Box((-a,), (a,)))


def test_lyapunov_certificate_valid():
    cert = lyapunov_construct(problems.free_coupled(half_width=10), BOX(2), BOX(3), BOX(1), H)
    assert cert.valid
    assert cert.residual <= 1e-8 * cert.scale
    assert cert.kappa1 > 0 and cert.details["delta1"] == cert.kappa1
    rows = cert.grid.row_dof
    assert cert.V.ravel()[rows].min() == pytest.approx(1.0, abs=1e-15)


def test_lyapunov_shrinking_k():
    spec = problems.free_coupled(half_width=10)
    deltas = []
    for w in (1.0, 0.5, 0.25, 0.1):
        cert = lyapunov_construct(spec, BOX(2), BOX(2.05), BOX(w), H)
        assert cert.valid
        deltas.append(cert.kappa1)
    assert all(d > 0 for d in deltas)
    assert all(b < a for a, b in zip(deltas, deltas[1:]))


def test_lyapunov_gap_nonpositive():
    # a single-cell K in a domain enlarged by many cells cannot beat the domain effect
    with pytest.raises(GapNonpositive):
        lyapunov_construct(problems.free_coupled(half_width=10), BOX(2), BOX(3), BOX(0.1), H)


@pytest.fixture(scope="module")
def ou_stability():
    spec = problems.ou()
    lim = lambda_star(spec, [4, 8, 16], H)
    return spec, lim, exp_stability_test(spec, lim, problems.unit_bump())


def test_ou_exp_stable(ou_stability):
    _, _, (verdict, cert) = ou_stability
    assert verdict.classification == EXP_STABLE
    assert cert.valid
    assert verdict.evidence["gap"] > verdict.thresholds["gap_tol"]
    assert verdict.details["regularity"].classification == REGULAR
    assert np.all(cert.V.ravel()[cert.grid.row_dof] >= 1.0)


def test_exp_stable_implies_twisted_recurrent(ou_stability):
    spec, lim, (verdict, _) = ou_stability
    assert verdict.classification == EXP_STABLE
    tp = twist(spec, lim.pair)
    radii = [R for R in (4, 8, 16) if R < tp.data_radius]
    assert recurrence_test(tp.spec, B1, radii, H).classification == RECURRENT


def test_scaled_perturbed_eigenfunction_same_verdict(ou_stability, monkeypatch):
    spec, lim, (verdict, cert) = ou_stability
    original = stability.lambda_star

    def scaled(*args, **kw):
        out = original(*args, **kw)
        return replace(out, pair=replace(out.pair, psi=3.0 * out.pair.psi))

    monkeypatch.setattr(stability, "lambda_star", scaled)
    v3, c3 = exp_stability_test(spec, lim, problems.unit_bump())
    assert v3.classification == verdict.classification
    assert c3.residual == pytest.approx(cert.residual, abs=1e-12 * cert.scale)
    np.testing.assert_allclose(c3.V, cert.V, rtol=1e-12)


def test_free_coupled_not_exp_stable():
    spec = problems.free_coupled(half_width=40)
    lim = lambda_star(spec, [4, 8, 16], H)
    try:
        verdict, _ = exp_stability_test(spec, lim, problems.unit_bump())
    except GapNonpositive:
        return
    assert verdict.classification == INCONCLUSIVE
