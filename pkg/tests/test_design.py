import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meanscore import checks, design
from meanscore.design import (Allocation, NuisanceEstimates, adaptive_allocation, balanced_allocation,
                              optimal_allocation, oracle_nuisance, pilot_nuisance, sample_allocation,
                              srs_allocation, undersampled_pilot)
from meanscore.errors import DataError, SingularMatrixError
from meanscore.mean_score import mean_score_fit
from meanscore.model import LinkKind, score_matrix, weighted_derivatives
from meanscore.strata import StratumKey, build_strata, phase_one_counts, stratum_ids
from oracles import allocation_objective, exhaustive_allocation, waterfill


def keys(m):
    return [StratumKey(j + 1, True, (0,)) for j in range(m)]


def strata(sizes):
    return dict(zip(keys(len(sizes)), sizes))


def diag_nuisance(sds, P=2, k=0):
    """Nuisance with identity information and stratum variance sd^2 on component ``k``."""
    covs = {}
    for key, sd in zip(keys(len(sds)), sds):
        m = np.eye(P) * 0.1
        m[k, k] = sd ** 2
        covs[key] = m
    return NuisanceEstimates(np.eye(P), covs, "oracle")


class TestSRS:
    def test_full_and_empty(self, rng):
        s = strata([5, 7, 9])
        assert srs_allocation(s, 21, rng).vector(keys(3)).tolist() == [5, 7, 9]
        assert srs_allocation(s, 0, rng).vector(keys(3)).tolist() == [0, 0, 0]

    def test_hypergeometric_mean(self):
        r = np.random.default_rng(0)
        draws = np.array([srs_allocation(strata([60, 40]), 10, r).vector(keys(2)) for _ in range(10_000)])
        np.testing.assert_allclose(draws.mean(axis=0), [6, 4], atol=0.1)

    def test_too_large(self, rng):
        with pytest.raises(DataError):
            srs_allocation(strata([3, 3]), 7, rng)


class TestBalanced:
    def test_equal_split(self):
        assert balanced_allocation(strata([100, 150, 200, 120]), 400).vector(keys(4)).tolist() == [100] * 4

    def test_saturation_and_remainder(self):
        assert balanced_allocation(strata([5, 500, 500]), 300).vector(keys(3)).tolist() == [5, 148, 147]

    def test_single_stratum(self):
        assert balanced_allocation(strata([50]), 17).total == 17

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=1, max_size=8), st.data())
    def test_matches_greedy_waterfill(self, sizes, data):
        n = data.draw(st.integers(0, sum(sizes)))
        got = balanced_allocation(strata(sizes), n).vector(keys(len(sizes))).tolist()
        assert got == waterfill(sizes, n)

    def test_random_remainder_respects_caps(self):
        r = np.random.default_rng(1)
        a = balanced_allocation(strata([3, 50, 50, 50]), 100, rng=r)
        v = a.vector(keys(4))
        assert v.sum() == 100 and v[0] == 3 and v[1:].max() - v[1:].min() <= 1


class TestOptimal:
    def test_identical_strata_equal_counts(self):
        a = optimal_allocation(strata([100] * 4), diag_nuisance([1.0] * 4), 0, 80)
        assert a.vector(keys(4)).tolist() == [20] * 4

    def test_neyman_two_to_one(self):
        a = optimal_allocation(strata([500, 500]), diag_nuisance([2.0, 1.0]), 0, 90)
        assert a.vector(keys(2)).tolist() == [60, 30]

    def test_capping(self):
        a = optimal_allocation(strata([10, 500, 500]), diag_nuisance([100.0, 1.0, 1.0]), 0, 100)
        assert a.vector(keys(3)).tolist() == [10, 45, 45]

    def test_brute_force_instances(self):
        r = np.random.default_rng(2024)
        exact = 0
        for _ in range(50):
            ks, N, n, nuis = checks.random_allocation_instance(r)
            k = int(r.integers(0, 2))
            inv = np.linalg.inv(nuis.info_matrix)
            v = [float(inv[k] @ nuis.stratum_cov[key] @ inv[k]) for key in ks]
            ours = optimal_allocation(dict(zip(ks, N.tolist())), nuis, k, n).vector(ks)
            best, best_obj = exhaustive_allocation(N, v, n)
            obj = allocation_objective(ours, N, v)
            neighbours = [allocation_objective(nb, N, v) for nb in checks.swap_neighbours(ours, N)]
            assert obj <= best_obj * (1 + 1e-12) or min(neighbours) <= best_obj * (1 + 1e-12)
            exact += tuple(ours) == tuple(best)
        assert exact >= 40

    def test_scale_invariance(self):
        nuis = diag_nuisance([0.3, 1.7, 0.9, 2.2])
        scaled = NuisanceEstimates(nuis.info_matrix, {k: 7.5 * v for k, v in nuis.stratum_cov.items()}, "oracle")
        s = strata([40, 90, 60, 200])
        assert optimal_allocation(s, nuis, 0, 120).counts == optimal_allocation(s, scaled, 0, 120).counts

    def test_zero_weights_fall_back_to_proportional(self, caplog):
        nuis = diag_nuisance([0.0, 0.0])
        for v in nuis.stratum_cov.values():
            v[:] = 0
        with caplog.at_level(logging.WARNING):
            a = optimal_allocation(strata([300, 100]), nuis, 0, 40)
        assert a.vector(keys(2)).tolist() == [30, 10]
        assert "proportional" in caplog.text

    def test_singular_information(self):
        nuis = NuisanceEstimates(np.zeros((2, 2)), {k: np.eye(2) for k in keys(2)}, "oracle")
        with pytest.raises(SingularMatrixError):
            optimal_allocation(strata([10, 10]), nuis, 0, 5)

    def test_bad_target(self):
        with pytest.raises(DataError):
            optimal_allocation(strata([10, 10]), diag_nuisance([1, 1]), 5, 5)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 200), st.floats(0.05, 5.0)), min_size=2, max_size=7), st.data())
    def test_invariants_and_proportionality(self, spec, data):
        sizes = [s for s, _ in spec]
        sds = [sd for _, sd in spec]
        n = data.draw(st.integers(len(sizes), sum(sizes)))
        a = optimal_allocation(strata(sizes), diag_nuisance(sds), 0, n)
        c = a.vector(keys(len(sizes)))
        assert c.sum() == n and np.all(c <= sizes) and np.all(c >= 1)
        w = np.array(sizes) * np.array(sds)
        free = [s for s in range(len(sizes)) if 1 < c[s] < sizes[s]]
        for s, t in itertools.combinations(free, 2):
            assert abs(c[s] / w[s] - c[t] / w[t]) <= 1.0 / min(w[s], w[t]) + 1e-9


class TestAdaptive:
    def test_zero_pilot_gives_optimal(self):
        opt = Allocation(strata([10, 30, 60]), 100)
        pilot = Allocation(strata([0, 0, 0]), 0)
        assert adaptive_allocation(opt, pilot, strata([50, 50, 100])).counts == opt.counts

    def test_pilot_covering_optimal_gives_zero(self):
        opt = Allocation(strata([10, 30, 60]), 100)
        pilot = Allocation(strata([20, 30, 50]), 100)
        a = adaptive_allocation(opt, pilot, strata([50, 50, 100]))
        assert a.total == 0 and set(a.counts.values()) == {0}

    def test_oversampled_stratum_hand_computed(self):
        # pilot over-samples stratum 1: it gets nothing and the remaining 50 units
        # follow k * opt - pilot on the other two with k = 90 / 98
        opt = Allocation(strata([2, 58, 40]), 100)
        pilot = Allocation(strata([10, 20, 20]), 50)
        a = adaptive_allocation(opt, pilot, strata([30, 200, 200]))
        assert a.vector(keys(3)).tolist() == [0, 33, 17]

    def test_saturated_stratum(self):
        # stratum 1 is exhausted by the pilot, the rest spread in proportion to opt
        opt = Allocation(strata([12, 48, 40]), 100)
        pilot = Allocation(strata([12, 10, 18]), 40)
        a = adaptive_allocation(opt, pilot, strata([12, 100, 100]))
        assert a.vector(keys(3)).tolist() == [0, 38, 22]

    def test_pilot_exceeds_budget(self):
        with pytest.raises(DataError):
            adaptive_allocation(Allocation(strata([5, 5]), 10), Allocation(strata([6, 6]), 12), strata([20, 20]))

    def test_two_stage_brute_force(self):
        """Given the pilot, the adaptive counts minimise the remaining design variance."""
        r = np.random.default_rng(9)
        for _ in range(30):
            N = r.integers(3, 15, 3)
            sds = r.uniform(0.2, 3, 3)
            n = int(r.integers(6, min(24, N.sum()) + 1))
            nuis = diag_nuisance(sds.tolist())
            opt = optimal_allocation(strata(N.tolist()), nuis, 0, n)
            pilot_v = np.minimum(r.integers(1, 5, 3), N)
            if pilot_v.sum() >= n:
                continue
            pilot = Allocation(strata(pilot_v.tolist()), int(pilot_v.sum()))
            add = adaptive_allocation(opt, pilot, strata(N.tolist())).vector(keys(3))
            v = sds ** 2
            best = min(allocation_objective(pilot_v + np.array(c), N, v)
                       for c in itertools.product(*[range(int(N[s] - pilot_v[s]) + 1) for s in range(3)])
                       if sum(c) == n - pilot_v.sum())
            total = pilot_v + add
            obj = allocation_objective(total, N, v)
            nbs = [allocation_objective(pilot_v + nb, N, v)
                   for nb in checks.swap_neighbours(add, N - pilot_v)]
            assert obj <= best * (1 + 1e-12) or min(nbs) <= best * (1 + 1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 80), min_size=2, max_size=6), st.lists(st.floats(0.1, 4), min_size=6,
           max_size=6), st.data())
    def test_composition(self, sizes, sds, data):
        s = strata(sizes)
        n = data.draw(st.integers(2, sum(sizes)))
        n_pilot = data.draw(st.integers(0, n))
        pilot = balanced_allocation(s, n_pilot)
        opt = optimal_allocation(s, diag_nuisance(sds[: len(sizes)]), 0, n)
        add = adaptive_allocation(opt, pilot, s)
        both = pilot.vector(keys(len(sizes))) + add.vector(keys(len(sizes)))
        assert both.sum() == n and np.all(both <= sizes) and np.all(add.vector(keys(len(sizes))) >= 0)


class TestUndersampledPilot:
    def test_no_match_is_balanced(self):
        s = strata([30, 40, 50])
        assert undersampled_pilot(s, 60, lambda k: False).counts == balanced_allocation(s, 60).counts

    def test_match_all(self):
        sizes = [2, 10, 10, 10]
        a = undersampled_pilot(strata(sizes), 30, lambda k: True, cap_per_stratum=4)
        assert a.vector(keys(4)).tolist() == waterfill(sizes, 30 - 14, start=[2, 4, 4, 4])

    def test_default_predicate_on_nwts_like(self):
        from meanscore import nwts
        config = nwts.NWTSLikeConfig(N=3915, p_dropout=0.04)
        time, event, cohort = nwts.continuous_cohort(np.random.default_rng(3), config)
        counts = phase_one_counts(cohort)
        matched = [k for k in counts if not k.event and k.time_index < cohort.n_times]
        assert matched
        a = undersampled_pilot(counts, 200, cap_per_stratum=4)
        for k in matched:
            assert a[k] == min(4, counts[k])
        assert a.total == 200


class TestNuisance:
    def test_pilot_all_is_unweighted_information(self, small_cohort):
        nuis = pilot_nuisance(small_cohort, np.arange(small_cohort.size))
        _, _, H = weighted_derivatives(nuis.theta, small_cohort)
        np.testing.assert_allclose(nuis.info_matrix, -H / small_cohort.size, rtol=1e-10)

    def test_oracle_matches_pilot_all(self, small_cohort):
        p = pilot_nuisance(small_cohort, np.arange(small_cohort.size))
        o = oracle_nuisance(small_cohort, LinkKind.CLOGLOG, p.theta)
        np.testing.assert_allclose(o.info_matrix, p.info_matrix, rtol=1e-10)
        for k in p.stratum_cov:
            np.testing.assert_allclose(o.stratum_cov[k], p.stratum_cov[k], rtol=1e-10, atol=1e-14)

    def test_two_point_stratum_covariance(self, small_cohort):
        t = build_strata(small_cohort)
        pilot = []
        for s in range(len(t.keys)):
            members = np.flatnonzero(t.ids == s)
            pilot.extend(members[: 2 if s == 0 else max(3, members.size // 2)])
        pilot = np.sort(np.array(pilot))
        nuis = pilot_nuisance(small_cohort, pilot)
        two = np.flatnonzero(t.ids == 0)[:2]
        U = score_matrix(nuis.theta, small_cohort.subset(two))
        d = U[0] - U[1]
        np.testing.assert_allclose(nuis.stratum_cov[t.keys[0]], np.outer(d, d) / 2, rtol=1e-10)

    def test_small_strata_use_pooled(self, small_cohort):
        t = build_strata(small_cohort)
        pilot = np.concatenate([np.flatnonzero(t.ids == s)[: (1 if s == 0 else 20)] for s in range(len(t.keys))])
        nuis = pilot_nuisance(small_cohort, np.sort(pilot))
        assert t.keys[0] in nuis.fallback_strata
        np.testing.assert_allclose(nuis.stratum_cov[t.keys[0]], nuis.pooled_cov)
        unseen = StratumKey(99, True, (0,))
        np.testing.assert_allclose(nuis.cov_for(unseen), nuis.pooled_cov)

    def test_pilot_half_close_to_oracle(self):
        from meanscore import simulation as sim
        cfg = sim.ScenarioConfig()
        theta = cfg.theta()
        c = sim.generate_cohort(cfg, theta, np.random.default_rng(21), size=20_000)
        oracle = oracle_nuisance(c, LinkKind.CLOGLOG, theta)
        pilot = pilot_nuisance(c, np.random.default_rng(22).choice(c.size, c.size // 2, replace=False))
        err = np.linalg.norm(pilot.info_matrix - oracle.info_matrix) / np.linalg.norm(oracle.info_matrix)
        assert err < 0.05

    def test_mean_score_zero_at_truth(self):
        from meanscore import simulation as sim
        cfg = sim.ScenarioConfig()
        theta = cfg.theta()
        c = sim.generate_cohort(cfg, theta, np.random.default_rng(5), size=20_000)
        keys_, ids = stratum_ids(c)
        U = score_matrix(theta, c)
        means = np.array([U[ids == s].mean(axis=0) for s in range(len(keys_))])
        weights = np.bincount(ids) / c.size
        overall = weights @ means
        se = U.std(axis=0) / np.sqrt(c.size)
        assert np.all(np.abs(overall) < 4 * se)


def test_sample_allocation(small_cohort, rng):
    counts = phase_one_counts(small_cohort)
    alloc = balanced_allocation(counts, 60)
    first = sample_allocation(small_cohort, alloc, rng)
    assert np.unique(first).size == 60
    t = build_strata(small_cohort, first)
    assert {k: int(n) for k, n in zip(t.keys, t.n)} == {k: alloc[k] for k in t.keys}
    rest = {k: min(2, counts[k] - alloc[k]) for k in counts}
    second = sample_allocation(small_cohort, Allocation(rest, sum(rest.values())), rng, exclude=first)
    assert not set(first) & set(second)


def test_sample_allocation_errors(small_cohort, rng):
    with pytest.raises(DataError):
        sample_allocation(small_cohort, Allocation({StratumKey(9, True, (0,)): 1}, 1), rng)
    counts = phase_one_counts(small_cohort)
    k = next(iter(counts))
    with pytest.raises(DataError):
        sample_allocation(small_cohort, Allocation({k: counts[k]}, counts[k]), rng, exclude=[
            i for i in range(small_cohort.size)][:small_cohort.size])


def test_allocation_invariants():
    with pytest.raises(DataError):
        Allocation(strata([1, 2]), 4)
    with pytest.raises(DataError):
        Allocation(strata([-1, 2]), 1)
    with pytest.raises(DataError):
        Allocation(strata([5]), 5).check_capacity(strata([4]))
