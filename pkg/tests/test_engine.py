import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from conftest import bounded_pair, plan, two_state
from otfunif.engine import (
    DominationError,
    ErrorLedger,
    SparseDistribution,
    StepRecord,
    UniformizationRate,
    accumulate,
    advance_window,
    dtmc_step,
    exact_terms,
    jump_bound,
    self_loop_bound,
    total_error,
)
from otfunif.model import exit_rate, rate
from otfunif.stepper import choose_step


def test_sparse_distribution_drops_zeros_and_sorts():
    p = SparseDistribution({(1, 0): 0.25, (0, 2): 0.5, (3, 3): 0.0})
    assert len(p) == 2 and (3, 3) not in p
    states, probs = p.to_arrays(2)
    assert states.tolist() == [[0, 2], [1, 0]]
    assert probs.tolist() == [0.5, 0.25]
    assert p.marginal([0]).entries == {(0,): 0.5, (1,): 0.25}


def test_uniformization_rate_is_exit_rate_of_x_max(gene):
    lam = UniformizationRate.from_state((4, 7), gene)
    for t in (0.0, 100.0, 3600.0):
        assert lam(t) == pytest.approx(exit_rate((4, 7), t, gene), rel=1e-14)


def test_jump_bound_homogeneous_is_exact():
    spec = bounded_pair()
    pl = plan(spec, (10, 10), 0.0, 2.0)
    x = (3, 4)
    for j, c in enumerate(spec.classes):
        if c.enabled(x):
            assert jump_bound(j, x, pl, spec) == pytest.approx(rate(j, x, 0.0, spec) / pl.lam(0.0), rel=1e-14)


def test_jump_bounds_gene_expression_endpoints(gene):
    pl = plan(gene, (5, 5), 0.0, 50.0)
    x = (2, 3)
    assert jump_bound(0, x, pl, gene) == pytest.approx(0.05 / pl.lam(0.0), rel=1e-14)
    assert jump_bound(3, x, pl, gene) == pytest.approx(0.0005 * 3 / pl.lam(50.0), rel=1e-14)
    out_at_end = exit_rate(x, 50.0, gene) / pl.lam(50.0)
    assert self_loop_bound(x, pl, gene) == pytest.approx(1 - out_at_end, rel=1e-14)


def test_self_loop_bound_edge_cases():
    spec = bounded_pair()
    pl = plan(spec, (9, 9), 0.0, 1.0)
    assert self_loop_bound((9, 9), pl, spec) == pytest.approx(0.0, abs=1e-15)
    pl_small = plan(spec, (1, 1), 0.0, 1.0)
    with pytest.raises(DominationError):
        self_loop_bound((9, 9), pl_small, spec)


def test_self_loop_bound_absorbing_state():
    # pure death at zero has nothing enabled
    from conftest import pure_death

    spec = pure_death()
    pl = plan(spec, (10,), 0.0, 1.0)
    assert self_loop_bound((0,), pl, spec) == 1.0
    v, lost, defect = dtmc_step(SparseDistribution.point((0,)), pl, 0.0, spec)
    assert v.entries == {(0,): 1.0} and lost == 0.0 and defect == 0.0


def test_zero_length_window_has_no_defect(gene):
    pl = plan(gene, (6, 6), 100.0, 0.0)
    v = SparseDistribution({(0, 0): 0.5, (2, 3): 0.3, (1, 1): 0.2})
    for _ in range(4):
        v, lost, defect = dtmc_step(v, pl, 0.0, gene)
        assert lost == 0.0
        assert defect <= 1e-15


def test_one_step_from_origin(gene):
    pl = plan(gene, (5, 5), 0.0, 10.0)
    v, _, defect = dtmc_step(SparseDistribution.point((0, 0)), pl, 0.0, gene)
    u1 = 0.05 / pl.lam(0.0)
    u0 = 1 - 0.05 * (1 + 10 / 3600) / pl.lam(10.0)
    assert set(v) == {(0, 0), (1, 0)}
    assert v[(1, 0)] == pytest.approx(u1, rel=1e-14)
    assert v[(0, 0)] == pytest.approx(u0, rel=1e-14)
    assert u0 + u1 <= 1
    assert defect == pytest.approx(1 - u0 - u1, abs=1e-15)


def test_pruning_reports_removed_mass(gene):
    pl = plan(gene, (5, 5), 0.0, 10.0)
    v, lost, _ = dtmc_step(SparseDistribution.point((0, 0)), pl, 0.5, gene)
    assert set(v) == {(0, 0)}
    assert lost == pytest.approx(0.05 / pl.lam(0.0), rel=1e-14)


def test_accumulate_and_total_error():
    a = SparseDistribution({(0,): 1.0})
    assert accumulate([a], [0.25]).entries == {(0,): 0.25}
    acc = accumulate([a, a, a], [0.5, 0.3, 0.1])
    assert acc[(0,)] == pytest.approx(0.9)
    assert total_error(SparseDistribution()) == 1.0
    assert total_error(a) == 0.0


def test_two_state_window_matches_matrix_exponential():
    spec = two_state(0.7, 0.3)
    pl = plan(spec, (1, 1), 0.0, 0.5, epsilon=1e-14, R_star=40)
    res = advance_window(SparseDistribution.point((1, 0)), pl, spec, 0.0)
    Q = np.array([[-0.7, 0.7], [0.3, -0.3]])
    ref = np.array([1.0, 0.0]) @ expm(0.5 * Q)
    assert res.p_hat[(1, 0)] == pytest.approx(ref[0], abs=1e-12)
    assert res.p_hat[(0, 1)] == pytest.approx(ref[1], abs=1e-12)


def _full_uniformization(v0, pl, spec, R):
    """Plain Poisson mixture of min-bounded steps, no exact terms."""
    w = pl.truncation.weights
    vs = [v0]
    for _ in range(R):
        vs.append(dtmc_step(vs[-1], pl, 0.0, spec)[0])
    return accumulate(vs, w)


@pytest.mark.parametrize("exact", [1, 2, 3])
def test_exact_terms_dominate_min_bounds(gene, exact):
    v0 = SparseDistribution({(2, 5): 0.6, (3, 4): 0.4})
    pl = choose_step(5, 0.0, 3600.0, 1e-10, v0, gene)
    res = advance_window(v0, pl, gene, 0.0, exact, prune_result=False)
    plain = _full_uniformization(v0, pl, gene, pl.truncation.R)
    # exact early terms never lose more than the bounded ones
    assert res.p_hat.mass() >= plain.mass() - 1e-15
    for x, p in plain.items():
        assert res.p_hat[x] >= p - 1e-15
    if exact == 1:
        assert res.p_hat.mass() == pytest.approx(plain.mass(), abs=1e-15)


def test_exact_terms_conserve_mass(gene):
    v0 = SparseDistribution({(2, 5): 1.0})
    pl = choose_step(5, 100.0, 3600.0, 1e-10, v0, gene)
    emu = math.exp(-pl.mu)
    terms = exact_terms(v0, pl, gene, 3)
    assert math.fsum(terms[0].values()) == pytest.approx(emu, rel=1e-14)
    assert math.fsum(terms[1].values()) == pytest.approx(emu * pl.mu, rel=1e-12)
    assert math.fsum(terms[2].values()) == pytest.approx(emu * pl.mu**2 / 2, rel=1e-12)


def test_ledger_identity_per_window(gene):
    v = SparseDistribution.point((0, 0))
    led = ErrorLedger()
    t = 0.0
    for _ in range(30):
        pl = choose_step(5, t, 3600.0, 1e-10, v, gene)
        res = advance_window(v, pl, gene, 1e-12)
        led.add(StepRecord(t, pl.delta, pl.mu, pl.truncation.R, res.bounding_loss, res.poisson_loss,
                           res.prune_loss, res.window_size))
        v, t = res.p_hat, t + pl.delta
        assert min(res.bounding_loss, res.poisson_loss, res.prune_loss) >= 0
    assert abs((1 - v.mass()) - led.total) <= 1e-10
    pct = led.split_percent()
    assert sum(pct.values()) == pytest.approx(100.0, abs=0.1)


def test_table_ledger_read_only():
    led = ErrorLedger.from_table(np.array([[0, 1, 2, 3, 1e-9, 2e-9, 0, 10, -1]]))
    assert led.total == pytest.approx(3e-9)
    assert led.max_window_size == 10
    assert led.records[0].R == 3
    with pytest.raises(TypeError):
        led.add(StepRecord(0, 1, 1, 1, 0, 0, 0))


@st.composite
def gene_window(draw):
    x = (draw(st.integers(0, 40)), draw(st.integers(0, 200)))
    t = draw(st.floats(0.0, 3000.0))
    R_star = draw(st.integers(1, 20))
    return x, t, R_star


@settings(max_examples=60, deadline=None)
@given(gene_window())
def test_bounds_valid_on_sampled_times(gene, xw):
    x, t, R_star = xw
    support = SparseDistribution.point(x)
    pl = choose_step(R_star, t, 3600.0, 1e-10, support, gene)
    samples = np.linspace(pl.t_start, pl.t_end, 64)
    states = [x] + [tuple(np.add(x, c.change)) for c in gene.classes if c.enabled(x)]
    for y in states:
        u0 = self_loop_bound(y, pl, gene)
        row = u0
        for j, c in enumerate(gene.classes):
            u = jump_bound(j, y, pl, gene)
            row += u
            for s in samples:
                assert u <= rate(j, y, s, gene) / pl.lam(s) * (1 + 1e-12) + 1e-300
        for s in samples:
            assert u0 <= 1 - exit_rate(y, s, gene) / pl.lam(s) + 1e-12
        assert row <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.tuples(st.integers(0, 15), st.integers(0, 40)), st.floats(1e-6, 1.0),
                       min_size=1, max_size=12))
def test_dtmc_step_is_substochastic(gene, entries):
    total = sum(entries.values())
    v = SparseDistribution({x: p / total for x, p in entries.items()})
    pl = choose_step(8, 50.0, 3600.0, 1e-10, v, gene)
    for _ in range(5):
        nxt, lost, defect = dtmc_step(v, pl, 1e-6, gene)
        assert nxt.mass() <= v.mass() + 1e-15
        assert defect >= 0
        assert nxt.mass() + lost + defect == pytest.approx(v.mass(), abs=1e-14)
        v = nxt


def test_unstepped_states_must_be_dominated(gene):
    # R = 0 windows only use the i = 0 term; Lam below the exit rate must still be caught
    v0 = SparseDistribution.point((30, 100))
    pl = plan(gene, (0, 0), 0.0, 1e-9, R_star=0)
    assert pl.truncation.R == 0
    with pytest.raises(DominationError):
        advance_window(v0, pl, gene, 0.0)
