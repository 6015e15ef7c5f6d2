"""Recovery ratios and the V-measure family against independent oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import contingency_oracle

from fedleak.attack import AttackResult, GroupingGraph, RecoveredSet
from fedleak.data import DataPrior, SyntheticSpec, generate_synthetic, partition_iid
from fedleak.metrics import (
    compute_ratios,
    evaluate_attack,
    labels_from_components,
    match_recovered,
    v_measure,
)


def random_partition(rng, n, n_groups):
    labels = rng.integers(0, n_groups, size=n)
    comps = [np.flatnonzero(labels == g).tolist() for g in range(n_groups)]
    return [c for c in comps if c]


class TestComputeRatios:
    def test_empty_recovery(self):
        assert compute_ratios(0, [], 500, 100, 5) == (0.0, 0.0, 0.0)

    def test_perfect_attack(self):
        comps = [list(range(k * 100, (k + 1) * 100)) for k in range(5)]
        got = compute_ratios(500, comps, 500, 100, 5)
        assert got == (1.0, 1.0, 1.0)

    def test_matched_excludes_singletons(self):
        comps = [[0, 1, 2], [3], [4]]
        rho_rec, rho_match, _ = compute_ratios(5, comps, 50, 10, 2)
        assert rho_rec == pytest.approx(0.1)
        assert rho_match == pytest.approx(3 / 50)

    def test_component_ratio_top_k_only(self):
        comps = [[0, 1, 2, 3], [4, 5], [6]]
        _, _, rho_comp = compute_ratios(7, comps, 100, 10, 2)
        assert rho_comp == pytest.approx((4 + 2) / 2 / 10)

    def test_component_ratio_can_exceed_one(self):
        comps = [list(range(30))]
        _, _, rho_comp = compute_ratios(30, comps, 100, 10, 2)
        assert rho_comp == pytest.approx(30 / 2 / 10)
        assert rho_comp > 1.0

    def test_partition_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compute_ratios(5, [[0, 1]], 50, 10, 2)


class TestVMeasure:
    def test_exact_partition(self):
        comps = [[0, 1], [2, 3], [4]]
        labels = [0, 0, 1, 1, 2]
        assert v_measure(comps, labels) == (1.0, 1.0, 1.0)

    def test_singleton_clusters(self):
        # pure singletons: perfectly homogeneous, poorly complete; the
        # completeness value follows the conditional-entropy definition
        comps = [[i] for i in range(6)]
        labels = [0, 0, 0, 1, 1, 1]
        h, c, v = v_measure(comps, labels)
        assert h == 1.0
        assert c == pytest.approx(1.0 - math.log(3) / math.log(6), abs=1e-12)
        assert (h, c, v) == pytest.approx(contingency_oracle(comps, labels), abs=1e-12)

    def test_single_cluster_single_class(self):
        h, c, v = v_measure([[0, 1, 2]], [0, 0, 0])
        assert (h, c, v) == (1.0, 1.0, 1.0)

    def test_empty_input_conventions(self):
        assert v_measure([], []) == (1.0, 1.0, 1.0)

    def test_matches_contingency_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(5, 200))
            comps = random_partition(rng, n, int(rng.integers(1, 8)))
            labels = rng.integers(0, int(rng.integers(1, 6)) + 1, size=n)
            got = v_measure(comps, labels)
            want = contingency_oracle(comps, labels)
            assert got == pytest.approx(want, abs=1e-12)

    def test_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 60))
            comps = random_partition(rng, n, 4)
            labels = rng.integers(0, 3, size=n)
            h, c, v = v_measure(comps, labels)
            assert 0.0 <= h <= 1.0 and 0.0 <= c <= 1.0 and 0.0 <= v <= 1.0

    def test_merging_pure_same_client_clusters(self):
        """Merging two pure same-client clusters can only help completeness."""
        labels = [0, 0, 0, 0, 1, 1]
        split = [[0, 1], [2, 3], [4, 5]]
        merged = [[0, 1, 2, 3], [4, 5]]
        h1, c1, _ = v_measure(split, labels)
        h2, c2, _ = v_measure(merged, labels)
        assert h2 == h1 == 1.0
        assert c2 >= c1

    def test_component_validation(self):
        with pytest.raises(ValueError):
            labels_from_components([[0, 0]], 2)
        with pytest.raises(ValueError):
            labels_from_components([[0]], 2)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_v_measure_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 50))
    comps = random_partition(rng, n, int(rng.integers(2, 6)))
    labels = rng.integers(0, 4, size=n)
    base = v_measure(comps, labels)
    # relabel clusters (shuffle component order) and clients (permute labels)
    shuffled = [comps[i] for i in rng.permutation(len(comps))]
    relabel = rng.permutation(labels.max() + 1)
    assert v_measure(shuffled, labels) == pytest.approx(base, abs=1e-12)
    assert v_measure(comps, relabel[labels]) == pytest.approx(base, abs=1e-12)


class TestMatchingAndReports:
    def _setup(self):
        ds = generate_synthetic(SyntheticSpec("binary", d=16, n=30, classes=3, seed=3))
        part = partition_iid(ds, 3, seed=3, samples_per_client=10)
        pooled = ds.with_partition(part)
        rows = np.array([0, 4, 9, 14])
        rec = RecoveredSet(pooled.X[rows].copy(), [(0, 1, i) for i in range(4)],
                           DataPrior.binary())
        return pooled, rows, rec

    def test_match_recovered_identities(self):
        pooled, rows, rec = self._setup()
        sample_ids, client_ids = match_recovered(rec, pooled)
        assert np.array_equal(sample_ids, pooled.sample_ids[rows])
        assert np.array_equal(client_ids, pooled.client_ids[rows])

    def test_unmatched_flagged(self):
        pooled, _, rec = self._setup()
        vectors = rec.vectors.copy()
        vectors[1] = 1.0 - vectors[1]  # not a dataset sample (w.h.p.)
        rec2 = RecoveredSet(vectors, rec.provenance, rec.prior)
        sample_ids, _ = match_recovered(rec2, pooled)
        if vectors[1].tobytes() not in {r.tobytes() for r in pooled.X}:
            assert sample_ids[1] == -1

    def test_evaluate_attack_consistency(self):
        pooled, rows, rec = self._setup()
        graph = GroupingGraph(4, [[0, 1], [2], [3]], 1, 1)
        result = AttackResult(rec, [], graph, trace_p_censored=[0.0, 0.1])
        report = evaluate_attack(result, pooled, n_clients=3, client_size=10)
        assert report.rho_recovered == pytest.approx(4 / 30)
        assert report.rho_matched == pytest.approx(2 / 30)
        assert report.v_normalized == pytest.approx(
            report.rho_recovered * report.v_recovered)
        assert report.p_censored == pytest.approx(0.05)
        payload = report.to_dict()
        assert set(payload) == {
            "rho_recovered", "rho_matched", "rho_component", "homogeneity",
            "completeness", "v_recovered", "v_normalized", "p_censored"}
