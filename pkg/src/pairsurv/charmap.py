"""Characterization maps from paired binary test outcomes to compartments.

A map assigns each of the ``2**J`` true outcome vectors to one model
compartment.  When several outcomes share a compartment, the split of that
compartment's mass over its outcomes is given by within-compartment
weights (uniform unless supplied).

Outcome vectors are ordered with test 1 leftmost; the shipped maps put the
pathogen-detection test (PCR) first and antibody detection (serology)
second.  Observed results use ``1``, ``0`` or ``None`` for a missing entry.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidInputError

PCR = "pcr"
SEROLOGY = "serology"
MISSING_TOKENS = {"NA", "na", "", "NaN", "nan", None}


def outcome_vectors(num_tests: int):
    """All complete outcome tuples in code order (test 1 is the most significant bit)."""
    return list(itertools.product((0, 1), repeat=num_tests))


def bitstring(outcome) -> str:
    return "".join(str(int(t)) for t in outcome)


def encode(outcome) -> int:
    code = 0
    for t in outcome:
        code = 2 * code + int(t)
    return code


@dataclass(frozen=True)
class TestPerformance:
    """Per-test sensitivity and specificity."""

    sensitivity: tuple
    specificity: tuple

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        sens = tuple(float(v) for v in self.sensitivity)
        spec = tuple(float(v) for v in self.specificity)
        if len(sens) != len(spec):
            raise InvalidInputError("sensitivity and specificity need one entry per test")
        for v in sens + spec:
            if not (0.0 <= v <= 1.0):
                raise InvalidInputError(f"test performance entries must lie in [0, 1], got {v}")
        object.__setattr__(self, "sensitivity", sens)
        object.__setattr__(self, "specificity", spec)

    @classmethod
    def perfect(cls, num_tests: int) -> "TestPerformance":
        return cls((1.0,) * num_tests, (1.0,) * num_tests)

    @property
    def num_tests(self):
        return len(self.sensitivity)


@dataclass(frozen=True, init=False)
class CharacterizationMap:
    """Total map from ``{0,1}^J`` to compartments, with within-compartment weights."""

    tests: tuple
    compartments: tuple
    assignment: tuple  # compartment index per outcome code
    weights: tuple  # w(t | assignment[t]) per outcome code

    def __init__(self, tests: Sequence[str], compartments: Sequence[str],
                 assignment: Mapping, weights: Optional[Mapping] = None):
        tests = tuple(tests)
        compartments = tuple(compartments)
        num_tests = len(tests)
        if num_tests < 1 or not compartments:
            raise InvalidInputError("a map needs at least one test and one compartment")
        by_code = {}
        for key, comp in assignment.items():
            outcome = tuple(int(c) for c in key) if isinstance(key, str) else tuple(key)
            if len(outcome) != num_tests or any(t not in (0, 1) for t in outcome):
                raise InvalidInputError(f"bad outcome key {key!r} for {num_tests} tests")
            idx = compartments.index(comp) if comp in compartments else None
            if idx is None:
                raise InvalidInputError(f"unknown compartment {comp!r}")
            by_code[encode(outcome)] = idx
        if len(by_code) != 2 ** num_tests:
            raise InvalidInputError(f"assignment must cover all {2 ** num_tests} outcomes")
        assign = tuple(by_code[c] for c in range(2 ** num_tests))
        unused = set(range(len(compartments))) - set(assign)
        if unused:
            raise InvalidInputError(
                f"compartments {[compartments[u] for u in sorted(unused)]} have no outcome")

        w = np.zeros(2 ** num_tests)
        for y in range(len(compartments)):
            codes = [c for c in range(2 ** num_tests) if assign[c] == y]
            given = (weights or {}).get(compartments[y])
            if given is None:
                w[codes] = 1.0 / len(codes)
                continue
            for key, value in given.items():
                code = encode(int(ch) for ch in key) if isinstance(key, str) else encode(key)
                if code not in codes:
                    raise InvalidInputError(
                        f"weight given for outcome {key!r} outside the preimage of {compartments[y]!r}")
                if not (value >= 0.0 and math.isfinite(value)):
                    raise InvalidInputError(f"weights must be nonnegative, got {value}")
                w[code] = float(value)
            if abs(w[codes].sum() - 1.0) > 1e-12:
                raise InvalidInputError(
                    f"weights for {compartments[y]!r} sum to {w[codes].sum()!r}, not 1")
        object.__setattr__(self, "tests", tests)
        object.__setattr__(self, "compartments", compartments)
        object.__setattr__(self, "assignment", assign)
        object.__setattr__(self, "weights", tuple(float(v) for v in w))

    @property
    def num_tests(self) -> int:
        return len(self.tests)

    @property
    def num_compartments(self) -> int:
        return len(self.compartments)

    def compartment_index(self, y) -> int:
        if isinstance(y, str):
            if y not in self.compartments:
                raise InvalidInputError(f"unknown compartment {y!r}")
            return self.compartments.index(y)
        y = int(y)
        if not 0 <= y < self.num_compartments:
            raise InvalidInputError(f"compartment index {y} out of range")
        return y

    def test_index(self, j) -> int:
        if isinstance(j, str):
            if j not in self.tests:
                raise InvalidInputError(f"unknown test {j!r}")
            return self.tests.index(j)
        j = int(j)
        if not 0 <= j < self.num_tests:
            raise InvalidInputError(f"test index {j} out of range")
        return j

    def classify(self, outcome) -> str:
        """Compartment name for a complete outcome vector."""
        return self.compartments[self.assignment[encode(outcome)]]

    def preimage(self, y):
        """Outcome tuples mapped to compartment ``y`` (name or index)."""
        y = self.compartment_index(y)
        return [t for t in outcome_vectors(self.num_tests) if self.assignment[encode(t)] == y]

    def weight(self, outcome) -> float:
        return self.weights[encode(outcome)]

    @property
    def injective(self) -> bool:
        return len(set(self.assignment)) == len(self.assignment)

    def to_dict(self) -> dict:
        out = {
            "tests": list(self.tests),
            "compartments": list(self.compartments),
            "assignment": {bitstring(t): self.classify(t) for t in outcome_vectors(self.num_tests)},
        }
        if not self.injective:
            out["weights"] = {
                comp: {bitstring(t): self.weight(t) for t in self.preimage(comp)}
                for comp in self.compartments
            }
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "CharacterizationMap":
        try:
            return cls(data["tests"], data["compartments"], data["assignment"], data.get("weights"))
        except KeyError as err:
            raise InvalidInputError(f"map JSON is missing key {err}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CharacterizationMap":
        return cls.from_dict(json.loads(text))


def sibr_map(tests=(PCR, SEROLOGY)) -> CharacterizationMap:
    """SIBR map: (0,0)->S, (1,0)->I, (1,1)->B, (0,1)->R."""
    return CharacterizationMap(tests, ("S", "I", "B", "R"),
                               {"00": "S", "10": "I", "11": "B", "01": "R"})


def sir_map(assign_11: str = "I", weights=None, tests=(PCR, SEROLOGY)) -> CharacterizationMap:
    """SIR map with the doubly positive outcome sent to ``I`` or ``R``.

    ``weights`` splits the doubly assigned compartment over its two
    outcomes; uniform when omitted.  Fitted SIR-I/SIR-R results depend on
    this choice.
    """
    if assign_11 not in ("I", "R"):
        raise InvalidInputError(f"assign_11 must be 'I' or 'R', got {assign_11!r}")
    return CharacterizationMap(tests, ("S", "I", "R"),
                               {"00": "S", "10": "I", "01": "R", "11": assign_11}, weights)


SHIPPED_MAPS = {
    "sibr": sibr_map,
    "sir-i": lambda: sir_map("I"),
    "sir-r": lambda: sir_map("R"),
}


def map_by_name(name: str) -> CharacterizationMap:
    try:
        return SHIPPED_MAPS[name.lower()]()
    except KeyError:
        raise InvalidInputError(f"unknown map {name!r}; choose from {sorted(SHIPPED_MAPS)}") from None


# --- observation model ------------------------------------------------------


def _as_observed(obs, num_tests):
    out = []
    for v in obs:
        if v in MISSING_TOKENS or (isinstance(v, float) and math.isnan(v)):
            out.append(None)
        elif v in (0, 1, "0", "1", True, False):
            out.append(int(v))
        else:
            raise InvalidInputError(f"observed result must be 1, 0 or missing, got {v!r}")
    if len(out) != num_tests:
        raise InvalidInputError(f"outcome has {len(out)} entries, map has {num_tests} tests")
    return out


def _check_perf(cmap, perf):
    if perf.num_tests != cmap.num_tests:
        raise InvalidInputError(f"performance covers {perf.num_tests} tests, map has {cmap.num_tests}")


def _result_prob(observed, true, sens, spec):
    if true == 1:
        return sens if observed == 1 else 1.0 - sens
    return spec if observed == 0 else 1.0 - spec


def conditional_obs_prob(cmap: CharacterizationMap, perf: TestPerformance, y, obs) -> float:
    """P(T* = obs | Y = y); missing entries are marginalized out."""
    _check_perf(cmap, perf)
    y = cmap.compartment_index(y)
    obs = _as_observed(obs, cmap.num_tests)
    total = 0.0
    for t in cmap.preimage(y):
        term = cmap.weight(t)
        for j, (seen, true) in enumerate(zip(obs, t)):
            if seen is not None:
                term *= _result_prob(seen, true, perf.sensitivity[j], perf.specificity[j])
        total += term
    return total


def _check_pi(cmap, pi):
    pi = np.asarray(getattr(pi, "proportions", pi), dtype=float)
    if pi.shape != (cmap.num_compartments,):
        raise InvalidInputError(
            f"state has {pi.size} compartments, map has {cmap.num_compartments}")
    return pi


def marginal_obs_prob(cmap: CharacterizationMap, perf: TestPerformance, pi, obs) -> float:
    """P(T* = obs | pi), mixing the conditional kernel over compartments."""
    pi = _check_pi(cmap, pi)
    return sum(conditional_obs_prob(cmap, perf, y, obs) * pi[y] for y in range(cmap.num_compartments))


def marginal_positive_prob(cmap: CharacterizationMap, perf: TestPerformance, pi, j) -> float:
    """Probability that test ``j`` reads positive, summed over complete outcomes."""
    j = cmap.test_index(j)
    return sum(marginal_obs_prob(cmap, perf, pi, t)
               for t in outcome_vectors(cmap.num_tests) if t[j] == 1)


# --- matrix forms used by the likelihood ------------------------------------

# observed patterns are coded in base 3: 0 negative, 1 positive, 2 missing
MISSING = 2


def pattern_code(obs) -> int:
    code = 0
    for v in obs:
        code = 3 * code + (MISSING if v is None else int(v))
    return code


def pattern_codes(results: np.ndarray) -> np.ndarray:
    """Base-3 codes for an ``(H, J)`` integer array using -1 for missing."""
    results = np.asarray(results)
    digits = np.where(results < 0, MISSING, results)
    weights = 3 ** np.arange(results.shape[1] - 1, -1, -1)
    return (digits * weights).sum(axis=1).astype(np.int64)


def conditional_matrix(cmap: CharacterizationMap, perf: TestPerformance) -> np.ndarray:
    """Array ``Q[pattern, y] = P(T* = pattern | Y = y)`` over all ``3**J`` patterns."""
    _check_perf(cmap, perf)
    num_tests = cmap.num_tests
    sens = np.array(perf.sensitivity)
    spec = np.array(perf.specificity)
    true = np.array(outcome_vectors(num_tests))  # (2^J, J)
    # per-test factor table: [true value, observed digit] with the missing digit = 1
    factor = np.empty((num_tests, 2, 3))
    factor[:, 0, 0], factor[:, 0, 1], factor[:, 0, 2] = spec, 1.0 - spec, 1.0
    factor[:, 1, 0], factor[:, 1, 1], factor[:, 1, 2] = 1.0 - sens, sens, 1.0
    patterns = np.array(list(itertools.product(range(3), repeat=num_tests)))  # (3^J, J)
    emit = np.ones((patterns.shape[0], true.shape[0]))
    for j in range(num_tests):
        emit *= factor[j][true[:, j][None, :], patterns[:, j][:, None]]
    member = np.zeros((true.shape[0], cmap.num_compartments))
    member[np.arange(true.shape[0]), cmap.assignment] = cmap.weights
    return emit @ member


def positive_matrix(cmap: CharacterizationMap, perf: TestPerformance) -> np.ndarray:
    """Array ``P[y, j] = P(T*_j = 1 | Y = y)``."""
    _check_perf(cmap, perf)
    true = np.array(outcome_vectors(cmap.num_tests), dtype=float)
    sens = np.array(perf.sensitivity)
    spec = np.array(perf.specificity)
    pos_given_true = true * sens + (1.0 - true) * (1.0 - spec)  # (2^J, J)
    member = np.zeros((true.shape[0], cmap.num_compartments))
    member[np.arange(true.shape[0]), cmap.assignment] = cmap.weights
    return member.T @ pos_given_true
