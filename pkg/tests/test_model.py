import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otfunif.model import (
    ModelError,
    TimeFactor,
    builtin_model,
    enabled_classes,
    exclusive_switch,
    exit_rate,
    gene_expression,
    model_to_dict,
    parse_model,
    population_caps,
    rate,
    reachable_states,
)


def _doc(classes, species=("A", "B"), initial=None, horizon=10.0):
    return {
        "species": list(species),
        "horizon": horizon,
        "initial": initial or [{"state": [0] * len(species), "prob": 1.0}],
        "classes": classes,
    }


def test_builtins_round_trip_through_documents():
    for name, m, n in (("gene_expression", 4, 2), ("exclusive_switch", 10, 5)):
        spec = builtin_model(name)
        again = parse_model(json.dumps(model_to_dict(spec)))
        assert (again.m, again.n) == (m, n)
        assert again.classes == spec.classes
        assert again.initial == spec.initial


def test_gene_expression_change_vectors_distinct():
    spec = gene_expression()
    assert len({c.change for c in spec.classes}) == 4


def test_switch_initial_support():
    assert [x for x, _ in exclusive_switch().initial] == [(0, 0, 1, 0, 0)]


def test_unknown_builtin():
    with pytest.raises(ModelError, match="unknown"):
        builtin_model("foo")


def test_closure_violation_names_class():
    doc = _doc([{"name": "drain", "change": [-1, 0], "rate": {"constant": 1.0}}])
    with pytest.raises(ModelError, match="drain"):
        parse_model(doc)


def test_parse_errors():
    with pytest.raises(ModelError, match="JSON"):
        parse_model("{not json")
    with pytest.raises(ModelError, match="missing"):
        parse_model({"species": ["A"]})
    bad_init = _doc([{"name": "make", "change": [1, 0], "rate": {"constant": 1.0}}],
                    initial=[{"state": [0, 0], "prob": 0.5}])
    with pytest.raises(ModelError, match="sum"):
        parse_model(bad_init)
    bad_guard = _doc([{"name": "make", "change": [1, 0], "guard": [{"var": "Z", "min": 1}],
                       "rate": {"constant": 1.0}}])
    with pytest.raises(ModelError, match="unknown species"):
        parse_model(bad_guard)
    zero = _doc([{"name": "nothing", "change": [0, 0], "rate": {"constant": 1.0}}])
    with pytest.raises(ModelError, match="all zero"):
        parse_model(zero)


def test_time_factor_validity():
    with pytest.raises(ModelError):
        TimeFactor(1.0, -1.0, math.inf, "affine")
    with pytest.raises(ModelError):
        TimeFactor(1.0, -1.0, 2.0, "affine")
    tf = TimeFactor(1.0, -0.1, 5.0, "affine")
    assert tf(5.0) == pytest.approx(0.5)
    with pytest.raises(ModelError, match="beyond"):
        tf(6.0)


def test_horizon_beyond_validity_rejected():
    with pytest.raises(ModelError, match="valid until"):
        exclusive_switch(horizon=4000.0)


def test_enabled_classes_examples(gene, switch):
    assert enabled_classes((0, 0), gene) == [0]
    assert enabled_classes((1, 0), gene) == [0, 1, 2]
    assert enabled_classes((0, 0, 1, 0, 0), switch) == [0, 1]


def test_rate_examples(gene, switch):
    assert rate(0, (5, 3), 3600.0, gene) == pytest.approx(0.1, rel=1e-15)
    assert rate(4, (2, 0, 1, 0, 0), 0.0, switch) == pytest.approx(0.2, rel=1e-15)
    assert rate(1, (0, 3), 0.0, gene) == 0.0


def test_exit_rate_examples(gene, switch):
    assert exit_rate((0, 0), 0.0, gene) == pytest.approx(0.05)
    assert exit_rate((0, 0, 1, 0, 0), 0.0, switch) == pytest.approx(1.0)


def test_switch_caps_promoter_at_one(switch):
    caps = population_caps(switch)
    assert list(caps[2:]) == [1, 1, 1]
    assert caps[0] > 10**6 and caps[1] > 10**6


def test_switch_conservation_by_bfs(switch):
    states = reachable_states(switch, 8)
    assert len(states) > 50
    assert all(x[2] + x[3] + x[4] == 1 for x in states)


def _random_state(draw, spec):
    if spec.n == 5:
        promoter = draw(st.sampled_from([(1, 0, 0), (0, 1, 0), (0, 0, 1)]))
        return (draw(st.integers(0, 200)), draw(st.integers(0, 200))) + promoter
    return tuple(draw(st.integers(0, 200)) for _ in range(spec.n))


@st.composite
def model_state_time(draw):
    spec = draw(st.sampled_from([gene_expression(), exclusive_switch()]))
    return spec, _random_state(draw, spec), draw(st.floats(0.0, 3600.0))


@settings(max_examples=200, deadline=None)
@given(model_state_time())
def test_closure_and_separability(mst):
    spec, x, t = mst
    for j in enabled_classes(x, spec):
        c = spec.classes[j]
        y = np.add(x, c.change)
        assert (y >= 0).all()
        assert rate(j, x, t, spec) == c.time_factor(t) * c.state_factor(x)


@settings(max_examples=200, deadline=None)
@given(model_state_time(), st.integers(0, 2), st.integers(0, 1))
def test_rates_monotone_in_populations(mst, bump, which):
    spec, x, t = mst
    k = which  # protein / mRNA dims; promoter configuration stays fixed
    y = list(x)
    y[k] += bump
    for j, c in enumerate(spec.classes):
        if c.enabled(x):
            assert c.enabled(y)
            assert rate(j, y, t, spec) >= rate(j, x, t, spec)
    assert exit_rate(y, t, spec) >= exit_rate(x, t, spec)
