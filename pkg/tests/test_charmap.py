import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pairsurv import charmap as cm
from pairsurv.charmap import TestPerformance as Perf
from pairsurv.errors import InvalidInputError


def oracle_obs_prob(assign, weights, sens, spec, pi, obs):
    """Brute force over compartments, true outcomes and every test read-out."""
    J = len(sens)
    total = 0.0
    for y, p_y in enumerate(pi):
        for t in itertools.product((0, 1), repeat=J):
            if assign[t] != y:
                continue
            term = p_y * weights[t]
            for j in range(J):
                if obs[j] is None:
                    continue
                if t[j] == 1:
                    term *= sens[j] if obs[j] == 1 else 1 - sens[j]
                else:
                    term *= 1 - spec[j] if obs[j] == 1 else spec[j]
            total += term
    return total


@st.composite
def random_setup(draw):
    J = draw(st.integers(1, 3))
    outcomes = list(itertools.product((0, 1), repeat=J))
    C = draw(st.integers(1, len(outcomes)))
    # surjective assignment: first C outcomes cover every compartment, the rest are free
    perm = draw(st.permutations(outcomes))
    assign = {t: k for k, t in enumerate(perm[:C])}
    for t in perm[C:]:
        assign[t] = draw(st.integers(0, C - 1))
    raw = {t: draw(st.floats(0.05, 1.0)) for t in outcomes}
    weights = {}
    for y in range(C):
        pre = [t for t in outcomes if assign[t] == y]
        s = sum(raw[t] for t in pre)
        for t in pre:
            weights[t] = raw[t] / s
    sens = [draw(st.floats(0, 1)) for _ in range(J)]
    spec = [draw(st.floats(0, 1)) for _ in range(J)]
    pi = np.array([draw(st.floats(0.001, 1)) for _ in range(C)])
    pi /= pi.sum()
    names = [f"c{y}" for y in range(C)]
    tests = [f"t{j}" for j in range(J)]
    w_json = {names[y]: {cm.bitstring(t): weights[t] for t in outcomes if assign[t] == y}
              for y in range(C)}
    # renormalize the JSON weights exactly as the map will check them
    cmap = cm.CharacterizationMap(tests, names, {cm.bitstring(t): names[assign[t]] for t in outcomes},
                                  w_json)
    weights = {t: cmap.weight(t) for t in outcomes}
    return cmap, assign, weights, Perf(sens, spec), pi


# -- shipped maps ------------------------------------------------------------------


def test_sibr_map_assignment():
    m = cm.sibr_map()
    assert m.classify((0, 0)) == "S"
    assert m.classify((1, 0)) == "I"
    assert m.classify((1, 1)) == "B"
    assert m.classify((0, 1)) == "R"
    assert all(len(m.preimage(y)) == 1 for y in m.compartments)
    assert m.injective
    assert m.tests == ("pcr", "serology")


def test_sir_maps():
    i_map = cm.sir_map("I")
    r_map = cm.sir_map("R")
    assert set(i_map.preimage("I")) == {(1, 0), (1, 1)}
    assert set(r_map.preimage("R")) == {(0, 1), (1, 1)}
    assert i_map.preimage("S") == [(0, 0)] and r_map.preimage("S") == [(0, 0)]
    assert i_map.weight((1, 1)) == 0.5 and not i_map.injective
    weighted = cm.sir_map("I", {"I": {"10": 0.7, "11": 0.3}})
    assert weighted.weight((1, 0)) == 0.7
    with pytest.raises(InvalidInputError):
        cm.sir_map("B")


def test_map_by_name():
    assert cm.map_by_name("SIR-R").classify((1, 1)) == "R"
    with pytest.raises(InvalidInputError):
        cm.map_by_name("seir")


def test_map_validation():
    with pytest.raises(InvalidInputError):  # not total
        cm.CharacterizationMap(["a", "b"], ["S", "I"], {"00": "S", "01": "I", "10": "I"})
    with pytest.raises(InvalidInputError):  # not surjective
        cm.CharacterizationMap(["a"], ["S", "I", "R"], {"0": "S", "1": "I"})
    with pytest.raises(InvalidInputError):  # weights off the simplex
        cm.sir_map("I", {"I": {"10": 0.7, "11": 0.4}})
    with pytest.raises(InvalidInputError):  # weight outside the preimage
        cm.sir_map("I", {"I": {"10": 0.5, "01": 0.5}})
    with pytest.raises(InvalidInputError):
        Perf((1.1, 1), (1, 1))


def test_json_round_trip():
    for m in (cm.sibr_map(), cm.sir_map("I", {"I": {"10": 0.25, "11": 0.75}}), cm.sir_map("R")):
        back = cm.CharacterizationMap.from_json(m.to_json())
        assert back == m
    d = json.loads(cm.sir_map("R").to_json())
    assert set(d) == {"tests", "compartments", "assignment", "weights"}
    assert d["assignment"]["11"] == "R"
    assert "weights" not in json.loads(cm.sibr_map().to_json())
    with pytest.raises(InvalidInputError):
        cm.CharacterizationMap.from_dict({"tests": ["a"]})


# -- observation model -----------------------------------------------------------------


def test_conditional_examples():
    m = cm.sibr_map()
    perfect = Perf.perfect(2)
    assert cm.conditional_obs_prob(m, perfect, "I", (1, 0)) == 1.0
    assert cm.conditional_obs_prob(m, perfect, "I", (0, 0)) == 0.0
    serology = Perf((1, 0.989), (1, 1))
    assert cm.conditional_obs_prob(m, serology, "R", (0, 1)) == pytest.approx(0.989, abs=1e-15)
    assert cm.conditional_obs_prob(m, serology, "R", (0, 0)) == pytest.approx(0.011, abs=1e-15)
    assert cm.conditional_obs_prob(cm.sir_map("I"), perfect, "I", (1, 0)) == 0.5
    with pytest.raises(InvalidInputError):
        cm.conditional_obs_prob(m, perfect, 7, (1, 0))


def test_marginal_examples():
    m = cm.sibr_map()
    perfect = Perf.perfect(2)
    pi = (0.1, 0.2, 0.3, 0.4)
    for t in cm.outcome_vectors(2):
        assert cm.marginal_obs_prob(m, perfect, pi, t) == pi[m.compartment_index(m.classify(t))]
    assert cm.marginal_obs_prob(m, perfect, (1, 0, 0, 0), (0, 0)) == 1.0
    assert cm.marginal_obs_prob(m, perfect, (1, 0, 0, 0), (1, 0)) == 0.0
    # hand enumeration: S contributes 0.5 * 0.2, I contributes 0.5 * 0.9
    perf = Perf((0.9, 1), (0.8, 1))
    assert cm.marginal_obs_prob(m, perf, (0.5, 0.5, 0, 0), (1, 0)) == pytest.approx(0.55, abs=1e-15)
    with pytest.raises(InvalidInputError):
        cm.marginal_obs_prob(m, perfect, (0.5, 0.5, 0), (1, 0))


def test_marginal_positive_examples():
    m = cm.sibr_map()
    pi = (0.1, 0.2, 0.3, 0.4)
    perfect = Perf.perfect(2)
    assert cm.marginal_positive_prob(m, perfect, pi, 0) == pytest.approx(0.5, abs=1e-15)
    assert cm.marginal_positive_prob(m, perfect, pi, "serology") == pytest.approx(0.7, abs=1e-15)
    perf = Perf((1, 0.989), (1, 1))
    assert cm.marginal_positive_prob(m, perf, (0, 0, 0, 1), 1) == pytest.approx(0.989, abs=1e-15)
    with pytest.raises(InvalidInputError):
        cm.marginal_positive_prob(m, perf, pi, 2)


@settings(max_examples=200)
@given(random_setup())
def test_marginal_matches_oracle(setup):
    cmap, assign, weights, perf, pi = setup
    J = cmap.num_tests
    for obs in itertools.product((0, 1, None), repeat=J):
        want = oracle_obs_prob(assign, weights, perf.sensitivity, perf.specificity, pi, obs)
        assert cm.marginal_obs_prob(cmap, perf, pi, obs) == pytest.approx(want, abs=1e-14)


@settings(max_examples=200)
@given(random_setup())
def test_normalization(setup):
    cmap, _, _, perf, pi = setup
    outcomes = cm.outcome_vectors(cmap.num_tests)
    assert abs(sum(cm.marginal_obs_prob(cmap, perf, pi, t) for t in outcomes) - 1) <= 1e-12
    for y in range(cmap.num_compartments):
        assert abs(sum(cm.conditional_obs_prob(cmap, perf, y, t) for t in outcomes) - 1) <= 1e-12


@settings(max_examples=200)
@given(random_setup())
def test_missing_entry_consistency(setup):
    cmap, _, _, perf, pi = setup
    J = cmap.num_tests
    for obs in itertools.product((0, 1, None), repeat=J):
        for j in range(J):
            if obs[j] is None:
                continue
            missing = list(obs)
            missing[j] = None
            zero, one = list(obs), list(obs)
            zero[j], one[j] = 0, 1
            lhs = cm.marginal_obs_prob(cmap, perf, pi, missing)
            rhs = cm.marginal_obs_prob(cmap, perf, pi, zero) + cm.marginal_obs_prob(cmap, perf, pi, one)
            assert abs(lhs - rhs) <= 1e-15


@settings(max_examples=100)
@given(random_setup(), st.floats(0, 1), st.floats(0, 1))
def test_positive_prob_monotone(setup, a, b):
    cmap, _, _, perf, pi = setup
    lo, hi = min(a, b), max(a, b)
    for j in range(cmap.num_tests):
        def with_entry(kind, value):
            sens, spec = list(perf.sensitivity), list(perf.specificity)
            (sens if kind == "sens" else spec)[j] = value
            return Perf(sens, spec)
        p = lambda pf: cm.marginal_positive_prob(cmap, pf, pi, j)  # noqa: E731
        assert p(with_entry("sens", lo)) <= p(with_entry("sens", hi)) + 1e-15
        assert p(with_entry("spec", lo)) >= p(with_entry("spec", hi)) - 1e-15


@settings(max_examples=100)
@given(random_setup())
def test_matrix_forms_match_scalar_api(setup):
    cmap, _, _, perf, pi = setup
    J = cmap.num_tests
    Q = cm.conditional_matrix(cmap, perf)
    assert Q.shape == (3 ** J, cmap.num_compartments)
    for obs in itertools.product((0, 1, None), repeat=J):
        code = cm.pattern_code(obs)
        for y in range(cmap.num_compartments):
            assert Q[code, y] == pytest.approx(cm.conditional_obs_prob(cmap, perf, y, obs), abs=1e-15)
    P = cm.positive_matrix(cmap, perf)
    for j in range(J):
        assert pi @ P[:, j] == pytest.approx(cm.marginal_positive_prob(cmap, perf, pi, j), abs=1e-14)


def test_pattern_codes():
    results = np.array([[0, 0], [1, -1], [-1, 1], [-1, -1]])
    codes = cm.pattern_codes(results)
    assert codes.tolist() == [cm.pattern_code(o) for o in [(0, 0), (1, None), (None, 1), (None, None)]]
    assert codes.tolist() == [0, 5, 7, 8]
