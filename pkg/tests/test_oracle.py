import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import bounded_pair, linear_cascade, two_state
from otfunif.engine import SparseDistribution
from otfunif.model import ModelSpec, exclusive_switch, gene_expression
from otfunif.oracle import (
    StateBox,
    box_generator,
    generator_row,
    integrate_forward,
    total_variation,
    transient_homogeneous,
    verify_underapprox,
)
from otfunif.stepper import run


def test_state_box_enumeration_is_lexicographic():
    box = StateBox((1, 2))
    assert box.size == 6
    assert box.states().tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]
    assert [box.index(x) for x in box.states()] == list(range(6))
    with pytest.raises(KeyError):
        box.index((2, 0))


def test_generator_row_examples(gene):
    box = StateBox((5, 5))
    row = generator_row((1, 0), 0.0, box, gene)
    assert row == {(2, 0): 0.05, (1, 1): 0.05, (0, 0): 0.005, (1, 0): pytest.approx(-0.105)}
    # no enabled class inside the box: pure death at zero
    from conftest import pure_death

    assert generator_row((0,), 0.0, StateBox((3,)), pure_death()) == {}
    # outflow across the boundary is dropped from the diagonal too
    edge = generator_row((5, 5), 0.0, box, gene)
    assert (6, 5) not in edge and (5, 6) not in edge
    assert edge[(5, 5)] == pytest.approx(-(0.005 * 5 + 0.0005 * 5))


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(["gene", "switch"]), st.integers(0, 10), st.integers(0, 10), st.integers(0, 2),
       st.floats(0.0, 3600.0))
def test_generator_rows_sum_to_zero_exactly(which, a, b, promoter, t):
    if which == "gene":
        spec, x, box = gene_expression(), (a, b), StateBox((10, 10))
    else:
        p = [0, 0, 0]
        p[promoter] = 1
        spec, x, box = exclusive_switch(), (a, b, *p), StateBox((10, 10, 1, 1, 1))
    row = generator_row(x, t, box, spec)
    assert sum((Fraction(v) for v in row.values()), Fraction(0)) == 0 or (
        # the diagonal is the float sum of the off-diagonals; compare in exact arithmetic
        abs(sum(Fraction(v) for v in row.values())) <= Fraction(1, 10**15) * max(1, -row.get(x, 0))
    )


def test_box_generator_matches_rows(gene):
    box = StateBox((4, 6))
    gen = box_generator(box, gene)
    for t in (0.0, 1234.5):
        Q = gen.at(t).toarray()
        for x in box.states():
            row = generator_row(x, t, box, gene)
            dense = np.zeros(box.size)
            for y, v in row.items():
                dense[box.index(y)] = v
            np.testing.assert_allclose(Q[box.index(x)], dense, rtol=1e-14, atol=1e-18)
        np.testing.assert_allclose(Q.sum(axis=1), 0.0, atol=1e-15)


def test_zero_rate_model_stays_put():
    spec = ModelSpec(("A",), (), (((2,), 1.0),), 10.0)
    sol = integrate_forward({(2,): 1.0}, 0.0, 10.0, StateBox((4,)), spec)
    assert sol.as_dict() == {(2,): 1.0}
    assert sol.boundary_mass == 0.0


def test_two_state_closed_form():
    a, b = 0.7, 0.3
    spec = two_state(a, b)
    box = StateBox((1, 1))
    for t in (0.1, 1.0, 4.0):
        sol = integrate_forward({(1, 0): 1.0}, 0.0, t, box, spec, tol=1e-12)
        pa = b / (a + b) + a / (a + b) * math.exp(-(a + b) * t)
        assert sol[(1, 0)] == pytest.approx(pa, abs=1e-10)
        assert sol[(0, 1)] == pytest.approx(1 - pa, abs=1e-10)
        hom = transient_homogeneous({(1, 0): 1.0}, t, box, spec)
        assert hom[(1, 0)] == pytest.approx(pa, abs=1e-12)


def test_conservation_and_boundary_honesty(gene):
    tol = 1e-10
    roomy = integrate_forward({(0, 0): 1.0}, 0.0, 200.0, StateBox((40, 300)), gene, tol)
    assert abs(roomy.mass() - 1) <= 10 * tol
    assert roomy.boundary_mass < 1e-12
    tight = integrate_forward({(0, 0): 1.0}, 0.0, 200.0, StateBox((3, 3)), gene, tol)
    assert tight.boundary_mass > 1e-3
    # truncating the box changes the answer by no more than the escaped mass (times two in TV)
    tv = total_variation(roomy.as_dict(), tight.as_dict())
    assert tv <= 2 * tight.boundary_mass + 1e-9


def test_homogeneous_routes_agree():
    spec = bounded_pair()
    box = StateBox((10, 10))
    a = integrate_forward({(0, 0): 1.0}, 0.0, 10.0, box, spec, 1e-12)
    b = transient_homogeneous({(0, 0): 1.0}, 10.0, box, spec)
    assert total_variation(a.as_dict(), b.as_dict()) < 1e-9
    assert a.boundary_mass == b.boundary_mass == 0.0


def test_verify_examples():
    ref = {(0,): 0.5, (1,): 0.5}
    assert verify_underapprox(SparseDistribution(ref), ref).passed
    scaled = SparseDistribution({x: 1.01 * p for x, p in ref.items()})
    rep = verify_underapprox(scaled, ref)
    assert not rep.passed and len(rep.violations) == 2
    assert rep.worst == pytest.approx(0.005)
    # states missing from the reference count as zero
    assert not verify_underapprox(SparseDistribution({(5,): 1e-3}), ref).passed


def test_engine_under_oracle_on_switch(switch):
    spec = switch.with_horizon(20.0)
    res = run(spec, 5)
    ref = integrate_forward(dict(spec.initial), 0.0, 20.0, StateBox((60, 60, 1, 1, 1)), spec, 1e-10)
    assert ref.boundary_mass < 1e-12
    rep = verify_underapprox(res.final, ref, 1e-9)
    assert rep.passed, rep.violations[:5]
    assert abs((1 - res.final.mass()) - res.ledger.total) <= 1e-10


def test_linear_cascade_means():
    spec = linear_cascade(10.0)
    sol = integrate_forward({(0, 0): 1.0}, 0.0, 10.0, StateBox((60, 60)), spec, 1e-10)
    assert sol.boundary_mass < 1e-12
    # exact means of the linear system, integrated independently
    from scipy.integrate import solve_ivp

    def f(t, m):
        return [2.0 + 0.2 * t - 0.3 * m[0], 0.1 * m[0] - 0.1 * m[1]]

    exact = solve_ivp(f, (0, 10), [0.0, 0.0], rtol=1e-12, atol=1e-12).y[:, -1]
    np.testing.assert_allclose(sol.means(), exact, rtol=1e-7)


def test_moments_method_under_oracle_on_switch(switch):
    spec = switch.with_horizon(20.0)
    res = run(spec, 5, method="moments")
    ref = integrate_forward(dict(spec.initial), 0.0, 20.0, StateBox((60, 60, 1, 1, 1)), spec, 1e-10)
    rep = verify_underapprox(res.final, ref, 1e-9)
    assert rep.passed, rep.violations[:5]
