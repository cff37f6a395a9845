import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pairsurv import charmap as cm
from pairsurv import epimodel as em
from pairsurv import simstudy as ss
from pairsurv.charmap import TestPerformance as Perf
from pairsurv.errors import InvalidInputError
from pairsurv.inference import McmcConfig

FAST = ss.StudyConfig(mcmc=McmcConfig(chains=2, iterations=1000, thin=5))


@pytest.fixture(scope="module")
def traj():
    return ss.truth_trajectory(ss.StudyConfig())


# -- designs ------------------------------------------------------------------------------


def test_design_enumeration():
    designs = ss.enumerate_designs()
    assert len(designs) == 210
    assert len({d.design_id for d in designs}) == 210
    cells = {(d.total_samples, d.cadence) for d in designs}
    assert len(cells) == 14 and (10, "weekly") not in cells
    assert len(ss.enumerate_designs(["paired"])) == 70


def test_excluded_design_rejected():
    with pytest.raises(InvalidInputError, match="13 periods"):
        ss.StudyDesign(10, "weekly", "equal")
    with pytest.raises(InvalidInputError):
        ss.StudyDesign(20, "monthly", "equal")
    with pytest.raises(InvalidInputError):
        ss.StudyDesign(10, "daily", "equal")
    with pytest.raises(InvalidInputError):
        ss.StudyDesign(10, "monthly", "clustered")
    assert ss.StudyDesign(10, "monthly", "random").allocation == "uniform"


def test_design_id_round_trip():
    for d in ss.enumerate_designs():
        assert ss.StudyDesign.from_id(d.design_id) == d
    with pytest.raises(InvalidInputError):
        ss.StudyDesign.from_id("nonsense")


def test_periods():
    assert ss.periods("monthly") == [(1, 30), (31, 60), (61, 90)]
    assert len(ss.periods("biweekly")) == 6
    weekly = ss.periods("weekly")
    assert len(weekly) == 13 and weekly[-1] == (85, 90)
    for cadence in ss.CADENCES:
        days = [d for lo, hi in ss.periods(cadence) for d in range(lo, hi + 1)]
        assert days == list(range(1, 91))  # exact tiling


def test_equal_counts():
    assert ss.equal_counts(100, 3) == (34, 33, 33)
    assert ss.equal_counts(10, 6) == (2, 2, 2, 2, 1, 1)
    assert ss.equal_counts(500, 13) == (39,) * 6 + (38,) * 7


def test_allocation_weights():
    assert np.allclose(ss.allocation_weights("uniform", 4), 0.25)
    assert np.allclose(ss.allocation_weights("early", 3), np.array([3, 2, 1]) / 6)
    assert np.allclose(ss.allocation_weights("late", 3), np.array([1, 2, 3]) / 6)
    assert np.allclose(ss.allocation_weights("middle", 5), np.array([1, 2, 3, 2, 1]) / 9)
    assert np.allclose(ss.allocation_weights("middle", 6), np.array([1, 2, 3, 3, 2, 1]) / 12)


@settings(max_examples=100)
@given(st.integers(0, 2**63 - 1), st.sampled_from(ss.enumerate_designs(["paired"])))
def test_schedule_legality(seed, design):
    sched = ss.draw_schedule(design, np.random.default_rng(seed))
    for (lo, hi), day in zip(sched.periods, sched.days):
        assert lo <= day <= hi
    assert sched.total == design.total_samples
    assert len(sched.times()) == design.total_samples


def test_schedule_validation():
    with pytest.raises(InvalidInputError):
        ss.SamplingSchedule(((1, 30),), (31,), (5,))
    with pytest.raises(InvalidInputError):
        ss.SamplingSchedule(((1, 30),), (3,), (-1,))


def test_biased_allocations_lean_as_named():
    rng = np.random.default_rng(0)
    mean_day = {}
    for alloc in ("early", "middle", "late"):
        d = ss.StudyDesign(500, "weekly", alloc)
        mean_day[alloc] = np.mean([ss.draw_schedule(d, rng).times().mean() for _ in range(50)])
    assert mean_day["early"] < mean_day["middle"] < mean_day["late"]


# -- data simulation --------------------------------------------------------------------------


def test_dataset_size_and_masking(traj):
    rng = np.random.default_rng(1)
    for streams in ss.STREAMS:
        design = ss.StudyDesign(200, "biweekly", "uniform", streams)
        data = ss.simulate_dataset(traj, ss.draw_schedule(design, rng), cm.sibr_map(), Perf.perfect(2),
                                   streams, rng)
        assert len(data) == 200
        assert data.ids[0] == "s0001"
        if streams == "pathogen":
            assert np.all(data.results[:, 1] == -1) and np.all(data.results[:, 0] >= 0)
        elif streams == "antibody":
            assert np.all(data.results[:, 0] == -1) and np.all(data.results[:, 1] >= 0)
        else:
            assert np.all(data.results >= 0)


def test_schedule_past_trajectory_rejected(traj):
    short = em.integrate(em.SIBR, em.SibrParams(0.357, 0.143, 0.429), ss.TRUE_INIT, 0, 30)
    sched = ss.SamplingSchedule(((1, 90),), (60,), (3,))
    with pytest.raises(InvalidInputError):
        ss.simulate_dataset(short, sched, cm.sibr_map(), Perf.perfect(2), "paired", np.random.default_rng(0))


def test_positivity_tracks_trajectory(traj):
    # law of large numbers: observed per-day positivity approaches marginal positivity
    rng = np.random.default_rng(2)
    sched = ss.SamplingSchedule(((1, 90),), (34,), (200_000,))
    data = ss.simulate_dataset(traj, sched, cm.sibr_map(), Perf((0.9, 0.8), (0.95, 0.99)), "paired", rng)
    pi = em.state_at(traj, 34).proportions
    perf = Perf((0.9, 0.8), (0.95, 0.99))
    for j in range(2):
        want = cm.marginal_positive_prob(cm.sibr_map(), perf, pi, j)
        assert data.results[:, j].mean() == pytest.approx(want, abs=0.005)


@pytest.mark.parametrize("cmap, perf", [
    (cm.sibr_map(), Perf.perfect(2)),
    (cm.sibr_map(), Perf((0.9, 0.55), (0.97, 0.98))),
    (cm.sir_map("I"), Perf.perfect(2)),
    (cm.sir_map("R", {"R": {"01": 0.8, "11": 0.2}}), Perf((0.9, 0.8), (0.99, 0.95))),
])
def test_outcome_frequencies_calibrated(cmap, perf):
    rng = np.random.default_rng(7)
    outcomes = cm.outcome_vectors(2)
    for rep in range(20):
        pi = rng.dirichlet(np.ones(cmap.num_compartments))
        res = ss.simulate_results(np.tile(pi, (10_000, 1)), cmap, perf, rng)
        codes = res[:, 0] * 2 + res[:, 1]
        observed = np.bincount(codes, minlength=4)
        expected = 10_000 * np.array([cm.marginal_obs_prob(cmap, perf, pi, t) for t in outcomes])
        keep = expected > 0
        assert observed[~keep].sum() == 0
        p = stats.chisquare(observed[keep], expected[keep] * observed[keep].sum() / expected[keep].sum()).pvalue
        assert p > 0.001, (rep, observed, expected)


# -- replicate study ---------------------------------------------------------------------------


def test_replicate_seed_depends_only_on_identity():
    a = ss.replicate_seed(7, "n100-biweekly-uniform-paired", 3)
    assert a == ss.replicate_seed(7, "n100-biweekly-uniform-paired", 3)
    others = {ss.replicate_seed(7, "n100-biweekly-uniform-paired", r) for r in range(50)}
    assert len(others) == 50
    assert a != ss.replicate_seed(8, "n100-biweekly-uniform-paired", 3)
    assert a != ss.replicate_seed(7, "n100-biweekly-uniform-pathogen", 3)
    assert 0 <= a < 2**63


def test_replicate_independent_of_study_composition():
    d1 = ss.StudyDesign(50, "monthly", "equal")
    d2 = ss.StudyDesign(50, "biweekly", "late", "pathogen")
    alone = ss.run_study([d1], 2, FAST, master_seed=3)
    mixed = ss.run_study([d2, d1], 2, FAST, master_seed=3, workers=2)
    assert [r.design_id for r in mixed.replicates] == [d2.design_id] * 2 + [d1.design_id] * 2
    for r in alone.replicates:
        twin = [m for m in mixed.for_design(d1.design_id) if m.replicate == r.replicate][0]
        assert twin.crps == r.crps and twin.seed == r.seed


def test_single_replicate_determinism():
    d = ss.StudyDesign(50, "monthly", "equal")
    a = ss.run_study([d], 1, FAST, master_seed=11)
    b = ss.run_study([d], 1, FAST, master_seed=11)
    assert a.results_csv() == b.results_csv()
    assert a.aggregate_csv() == b.aggregate_csv()
    assert a.results_csv() != ss.run_study([d], 1, FAST, master_seed=12).results_csv()


def test_study_exports():
    d = ss.StudyDesign(50, "monthly", "equal")
    res = ss.run_study([d], 2, FAST, master_seed=1)
    lines = res.results_csv().splitlines()
    assert lines[0] == "design_id,replicate,seed,param,crps,relative_crps,converged"
    assert len(lines) == 1 + 2 * 4
    agg = res.aggregate_csv().splitlines()
    assert agg[0] == "design_id,param,mean_relative_crps,n_ok,n_failed"
    assert agg[1].startswith("n50-monthly-equal-paired,r0,") and agg[1].endswith(",2,0")
    mean = np.mean([r.relative_crps["eta"] for r in res.replicates])
    assert res.mean_relative_crps(d.design_id, "eta") == pytest.approx(mean, rel=1e-12)
    assert ss.designs_csv([d]).splitlines() == ["design_id,total_samples,cadence,allocation,streams",
                                                "n50-monthly-equal-paired,50,monthly,equal,paired"]


def test_failed_replicates_are_counted(monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("solver exploded")
    monkeypatch.setattr(ss, "posterior_sample", boom)
    d = ss.StudyDesign(50, "monthly", "equal")
    res = ss.run_study([d], 2, FAST, master_seed=1)
    assert res.n_failed == 2
    assert res.aggregate_csv().splitlines()[1] == "n50-monthly-equal-paired,r0,NA,0,2"
    assert "solver exploded" in res.replicates[0].error


def test_run_study_validation():
    d = ss.StudyDesign(50, "monthly", "equal")
    with pytest.raises(InvalidInputError):
        ss.run_study([d], 0, FAST)
    with pytest.raises(InvalidInputError):
        ss.run_study([d, d], 1, FAST)
