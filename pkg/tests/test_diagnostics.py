import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pairsurv import charmap as cm
from pairsurv import diagnostics as dg
from pairsurv import simstudy as ss
from pairsurv.charmap import TestPerformance as Perf
from pairsurv.data import SurveillanceDataset
from pairsurv.errors import InvalidInputError
from pairsurv.inference import DirichletPrior, NormalPrior, ParameterSpace, PriorSpec, ThetaVector
from pairsurv.epimodel import LABELS
from pairsurv.inference.mcmc import PosteriorChain

TESTS = ("pcr", "serology")
TRUE = ThetaVector("sibr", 0.357, 0.143, 0.429, 0.0, (0.999, 0.001, 0.0, 0.0))


def make_chains(thetas, model="sibr", n_chains=1):
    """Chains holding exactly the given parameter vectors, split across ``n_chains``."""
    k = len(LABELS[model])
    inits = {th.initial_state for th in thetas}
    # a shared initial state stays fixed so exact zeros survive encoding
    init = inits.pop() if len(inits) == 1 else DirichletPrior((1,) * k)
    space = ParameterSpace(model, PriorSpec(tau0=NormalPrior(0, 100), initial_state=init,
                                            eta=None if model == "sir" else PriorSpec().eta), TESTS)
    rows = np.array([space.natural(space.encode(th)) for th in thetas])
    parts = np.array_split(np.arange(len(thetas)), n_chains)
    return [PosteriorChain(c, tuple(space.output_names), rows[idx], np.zeros(idx.size),
                           np.arange(1, idx.size + 1), 1.0, 0, 1, space)
            for c, idx in enumerate(parts)]


def frozen(init, model="sibr"):
    """Parameters whose state never leaves ``init`` over the record window."""
    return ThetaVector(model, 0.3, 0.1, 0.2 if model == "sibr" else None, 1e4, tuple(init))


def dataset(times, results):
    return SurveillanceDataset(TESTS, [f"h{k}" for k in range(len(times))], times, results)


# -- CRPS ----------------------------------------------------------------------------------


def brute_crps(x, y):
    x = np.asarray(x, dtype=float)
    n = x.size
    return np.abs(x - y).mean() - np.abs(x[:, None] - x[None, :]).sum() / (2 * n * n)


def test_crps_hand_cases():
    assert dg.crps_empirical([3.0], 1.0) == 2.0
    assert dg.crps_empirical([1.0] * 5, 1.0) == 0.0
    assert abs(dg.crps_empirical([0.0, 2.0], 1.0) - 0.5) <= 1e-15
    assert abs(dg.crps_empirical([2.0, 0.0], 1.0) - 0.5) <= 1e-15
    # {0, 1} vs 0: 0.5 - 2 * 1 / (2 * 4) = 0.25
    assert abs(dg.crps_empirical([0.0, 1.0], 0.0) - 0.25) <= 1e-15


def test_crps_rejects_empty():
    with pytest.raises(InvalidInputError):
        dg.crps_empirical([], 1.0)


@settings(max_examples=300)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=60), st.floats(-1e3, 1e3))
def test_crps_matches_pairwise_oracle(x, y):
    assert dg.crps_empirical(x, y) == pytest.approx(max(brute_crps(x, y), 0.0), abs=1e-9)


def test_crps_bounds_many_cases():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        x = rng.normal(rng.normal(), rng.uniform(0.01, 5), n)
        y = rng.normal()
        c = dg.crps_empirical(x, y)
        assert 0.0 <= c <= np.abs(x - y).mean() + 1e-12


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(-1e3, 1e3))
def test_crps_zero_only_for_exact_point_mass(x, y):
    c = dg.crps_empirical(x, y)
    if all(v == y for v in x):
        assert c == 0.0
    elif brute_crps(x, y) > 1e-9:
        assert c > 0.0


def test_relative_crps():
    x = np.random.default_rng(1).normal(2.0, 0.3, 500)
    assert dg.relative_crps(x, 2.0) == pytest.approx(dg.crps_empirical(x, 2.0) / 2.0)
    # invariant to a common rescaling of draws and truth
    assert dg.relative_crps(7 * x, 14.0) == pytest.approx(dg.relative_crps(x, 2.0), rel=1e-12)
    with pytest.raises(InvalidInputError):
        dg.relative_crps(x, 0.0)


# -- log-score ---------------------------------------------------------------------------------


def test_log_score_half_probability():
    chains = make_chains([frozen((0.5, 0.5, 0.0, 0.0))])
    data = dataset([1.0, 2.0], [[1, 0], [0, -1]])
    rep = dg.log_score(chains, data, cm.sibr_map(), "sibr")
    assert rep.scores["pcr"] == pytest.approx(2 * math.log(0.5), abs=1e-12)
    assert rep.scores["serology"] == 0.0
    assert rep.combined == pytest.approx(2 * math.log(0.5), abs=1e-12)


def test_log_score_perfect_forecast_is_zero():
    chains = make_chains([frozen((1.0, 0.0, 0.0, 0.0))])
    data = dataset([0.0, 5.0, 9.0], [[0, 0], [0, 0], [-1, 0]])
    rep = dg.log_score(chains, data, cm.sibr_map(), "sibr")
    assert rep.scores == {"pcr": 0.0, "serology": 0.0}
    assert rep.combined == 0.0


def test_log_score_zero_probability_lists_records():
    chains = make_chains([frozen((1.0, 0.0, 0.0, 0.0))])
    data = dataset([0.0, 5.0, 9.0], [[0, 0], [1, 0], [0, 1]])
    rep = dg.log_score(chains, data, cm.sibr_map(), "sibr")
    assert rep.scores["pcr"] == -math.inf and rep.scores["serology"] == -math.inf
    assert rep.infinite_records == ["h1", "h2"]


def test_posterior_mean_probability_not_mean_log():
    # two draws with pcr positivity 0.2 and 0.6: p_hat is 0.4
    chains = make_chains([frozen((0.8, 0.2, 0.0, 0.0)), frozen((0.4, 0.6, 0.0, 0.0))])
    assert chains[0].space.init_free
    data = dataset([3.0], [[1, -1]])
    rep = dg.log_score(chains, data, cm.sibr_map(), "sibr")
    assert rep.scores["pcr"] == pytest.approx(math.log(0.4), abs=1e-12)


@pytest.fixture(scope="module")
def simulated():
    rng = np.random.default_rng(3)
    design = ss.StudyDesign(200, "biweekly", "uniform", "paired")
    data = ss.simulate_dataset(TRUE.trajectory(90), ss.draw_schedule(design, rng), cm.sibr_map(),
                               Perf.perfect(2), "paired", rng)
    draws = []
    for _ in range(30):
        draws.append(ThetaVector("sibr", TRUE.beta * rng.uniform(0.9, 1.1), TRUE.gamma * rng.uniform(0.9, 1.1),
                                 TRUE.eta * rng.uniform(0.9, 1.1), rng.normal(0, 1), TRUE.initial_state,
                                 (0.95, 0.9), (0.99, 0.98)))
    return data, make_chains(draws, n_chains=2)


def test_combined_is_sum_of_streams(simulated):
    data, chains = simulated
    rep = dg.log_score(chains, data, cm.sibr_map(), "sibr")
    assert abs(rep.combined - (rep.scores["pcr"] + rep.scores["serology"])) <= 1e-9
    only = dg.log_score(chains, data, cm.sibr_map(), "sibr", ["pcr"])
    assert only.scores["pcr"] == rep.scores["pcr"]
    assert only.scores["serology"] is None and only.combined is None


def test_log_score_additive_over_records(simulated):
    data, chains = simulated
    rng = np.random.default_rng(0)
    idx = rng.permutation(len(data))
    a, b = data.subset(np.sort(idx[:77])), data.subset(np.sort(idx[77:]))
    whole = dg.log_score(chains, data, cm.sibr_map(), "sibr")
    ra = dg.log_score(chains, a, cm.sibr_map(), "sibr")
    rb = dg.log_score(chains, b, cm.sibr_map(), "sibr")
    for t in TESTS:
        assert abs(whole.scores[t] - (ra.scores[t] + rb.scores[t])) <= 1e-12 * max(1.0, abs(whole.scores[t]))


def test_sir_fit_scores_only_its_tests(simulated):
    data, _ = simulated
    sir = make_chains([ThetaVector("sir", 0.357, 0.143, None, 0.0, (0.999, 0.001, 0.0), (0.95, 0.9),
                                   (0.99, 0.98))], model="sir")
    rep = dg.log_score(sir, data, cm.sir_map("I"), "sir", ["pcr"], label="SIR-I")
    row = rep.row()
    assert rep.header() == ["location", "model", "data_config", "score_pcr", "score_serology", "score_combined"]
    assert row[1] == "SIR-I" and row[4] == "" and row[5] == ""
    assert float(row[3]) == rep.scores["pcr"]


def test_score_table_and_validation(simulated):
    data, chains = simulated
    reps = [dg.log_score(chains, data, cm.sibr_map(), "sibr", label=m, data_config=c)
            for m, c in [("SIBR", "paired"), ("SIBR", "pcr-only")]]
    lines = dg.score_table(reps).splitlines()
    assert len(lines) == 3 and lines[1].startswith(",SIBR,paired,")
    with pytest.raises(InvalidInputError):
        dg.log_score(chains, data, cm.sir_map("I"), "sibr")
    with pytest.raises(InvalidInputError):
        dg.log_score(chains, data, cm.sibr_map(), "sibr", [])


# -- posterior predictive checks ----------------------------------------------------------------


def test_time_bins():
    idx, edges = dg.time_bins([3.0, 16.9, 17.0, 45.0], 14)
    assert idx.tolist() == [0, 0, 1, 3]
    assert edges.tolist() == [3.0, 17.0, 31.0, 45.0, 59.0]


def test_ppc_determinism_and_ordering(simulated):
    data, chains = simulated
    a = dg.posterior_predictive(chains, data, cm.sibr_map(), "sibr", n_reps=200, seed=4)
    b = dg.posterior_predictive(chains, data, cm.sibr_map(), "sibr", n_reps=200, seed=4)
    assert a.to_csv() == b.to_csv()
    c = dg.posterior_predictive(chains, data, cm.sibr_map(), "sibr", n_reps=200, seed=5)
    assert c.to_csv() != a.to_csv()
    for row in a.bins:
        assert row.q025 <= row.q50 <= row.q975
        assert 0 <= row.observed_rate <= 1
    assert a.to_csv().splitlines()[0] == "test,bin_start,bin_end,observed_rate,n_obs,q025,q50,q975"


def test_ppc_single_replicate_collapses(simulated):
    data, chains = simulated
    with pytest.warns(UserWarning):
        s = dg.posterior_predictive(chains, data, cm.sibr_map(), "sibr", n_reps=1, seed=2)
    for row in s.bins:
        assert row.q025 == row.q50 == row.q975
    with pytest.raises(InvalidInputError):
        dg.posterior_predictive(chains, data, cm.sibr_map(), "sibr", n_reps=0)


def test_ppc_flags_misfit():
    chains = make_chains([frozen((1.0, 0.0, 0.0, 0.0))])
    data = dataset(np.arange(0.0, 60.0, 2.0), np.ones((30, 2), dtype=int))
    s = dg.posterior_predictive(chains, data, cm.sibr_map(), "sibr", n_reps=100)
    assert s.coverage() == 0.0


def test_ppc_drops_empty_bins():
    chains = make_chains([frozen((0.5, 0.5, 0.0, 0.0))])
    data = dataset([0.0, 1.0, 40.0], [[1, -1], [0, -1], [1, -1]])
    s = dg.posterior_predictive(chains, data, cm.sibr_map(), "sibr", n_reps=100)
    assert ("pcr", 14.0, 28.0) in s.dropped
    assert all(r.test == "pcr" for r in s.bins)  # serology never observed
    assert math.isnan(s.coverage("serology"))


@pytest.mark.slow
def test_ppc_calibrated_for_true_model():
    rng = np.random.default_rng(9)
    cmap = cm.sibr_map()
    covered = []
    for rep in range(10):
        design = ss.StudyDesign(500, "biweekly", "uniform", "paired")
        data = ss.simulate_dataset(TRUE.trajectory(90), ss.draw_schedule(design, rng), cmap,
                                   Perf.perfect(2), "paired", rng)
        s = dg.posterior_predictive(make_chains([TRUE]), data, cmap, "sibr", n_reps=400, seed=rep)
        covered += [b.covered for b in s.bins]
    assert 0.85 <= np.mean(covered) <= 1.0
