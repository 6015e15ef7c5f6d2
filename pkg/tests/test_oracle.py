"""Oracle verifiers on small oracle-logged runs, both losses."""

import numpy as np
import pytest

from fedleak import model
from fedleak.data import DataPrior, SyntheticSpec, generate_synthetic, partition_iid
from fedleak.defense import DefenseConfig
from fedleak.federated import TrainingConfig, run_training
from fedleak.oracle import (
    reference_lambdas,
    verify_batch_decomposition,
    verify_isolated_recovery,
    verify_round_decomposition,
    verify_start_coverage,
)


def logged_run(loss_kind="cross_entropy", seed=0, t_max=4, n_updates=2,
               defense=None, head_widths=(), n_clients=3, per_client=8, d=22):
    task = "survival" if loss_kind == "cox" else "classification"
    config = TrainingConfig(
        n_clients=n_clients, dataset_size_per_client=per_client, batch_size=4,
        n_updates=n_updates, t_max=t_max, learning_rate=0.4, seed=seed,
        hidden_neurons=18, input_dim=d, n_outputs=1 if loss_kind == "cox" else 3,
        loss_kind=loss_kind, head_widths=head_widths,
        defense=defense or DefenseConfig(), oracle_logging=True)
    ds = generate_synthetic(SyntheticSpec(
        "binary", d=d, n=n_clients * per_client, classes=3, seed=seed + 1000, task=task))
    part = partition_iid(ds, n_clients, seed=seed, samples_per_client=per_client)
    pooled = ds.with_partition(part)
    return run_training(config, pooled, part), pooled


class TestReferenceLambdas:
    @pytest.mark.parametrize("loss_kind,widths", [
        ("cross_entropy", ()), ("cross_entropy", (5,)), ("cox", ()), ("cox", (5,)),
    ])
    def test_agrees_with_model_gradients(self, loss_kind, widths):
        rng = np.random.default_rng(1)
        for _ in range(10):
            params = model.init_params(rng, 6, 5, widths,
                                       1 if loss_kind == "cox" else 3)
            X = rng.normal(size=(5, 6))
            if loss_kind == "cox":
                y = (rng.exponential(1, 5), rng.random(5) < 0.7)
                if not y[1].any():
                    continue
            else:
                y = rng.integers(0, 3, 5)
            lam_ref = reference_lambdas(params, X, y, loss_kind)
            lam_model = model.gradients(params, X, y, loss_kind).lam
            np.testing.assert_allclose(lam_ref, lam_model, rtol=1e-12, atol=1e-15)

    def test_zero_gradient_batch(self):
        params = model.ModelParams(
            np.ones((3, 4)), np.ones(3),
            (model.HeadLayer(np.zeros((2, 3)), np.zeros(2)),))
        lam = reference_lambdas(params, np.ones((2, 4)), [0, 1], "cross_entropy")
        assert not lam.any()


class TestBatchDecomposition:
    @pytest.mark.parametrize("loss_kind", ["cross_entropy", "cox"])
    def test_small_run_below_1e9(self, loss_kind):
        trace, pooled = logged_run(loss_kind)
        report = verify_batch_decomposition(trace, pooled)
        assert report.n_checked == 3 * 4 * 2
        assert report.max_deviation < 1e-9

    def test_requires_oracle_log(self):
        trace, pooled = logged_run()
        trace.oracle_log = None
        with pytest.raises(ValueError):
            verify_batch_decomposition(trace, pooled)

    def test_with_hidden_head_layer(self):
        trace, pooled = logged_run(head_widths=(6,))
        assert verify_batch_decomposition(trace, pooled).max_deviation < 1e-9


class TestRoundDecomposition:
    @pytest.mark.parametrize("loss_kind", ["cross_entropy", "cox"])
    def test_small_run_below_1e9(self, loss_kind):
        trace, pooled = logged_run(loss_kind)
        report = verify_round_decomposition(trace, pooled)
        assert report.n_checked == trace.config.t_max
        assert report.max_deviation < 1e-9

    def test_defended_run_rejected(self):
        trace, pooled = logged_run(defense=DefenseConfig("q", q=2))
        with pytest.raises(ValueError):
            verify_round_decomposition(trace, pooled)

    def test_detects_corrupted_iterates(self):
        """The noise gate must not swallow a genuine identity violation."""
        trace, pooled = logged_run(seed=9)
        bad_W = trace.iterates[2].W.copy()
        bad_W[3] += 1e-5
        from fedleak.model import ModelParams
        trace.iterates[2] = ModelParams(bad_W, trace.iterates[2].b,
                                        trace.iterates[2].head)
        report = verify_round_decomposition(trace, pooled)
        assert report.max_deviation > 1e-6


class TestStartCoverage:
    def test_no_violations_on_random_runs(self):
        for seed in range(3):
            trace, pooled = logged_run(seed=seed, t_max=5)
            report = verify_start_coverage(trace, pooled)
            assert report.n_violations == 0
            assert report.n_nonempty_sets > 0

    def test_single_update_start_subset_equals_set(self):
        trace, pooled = logged_run(n_updates=1, t_max=3)
        log = trace.oracle_log
        for t in range(trace.config.t_max):
            for h in range(trace.config.hidden_neurons):
                assert np.array_equal(np.sort(log.round_sets[t][h]),
                                      np.sort(log.round_start_active[t][h]))

    def test_violations_detected_on_corrupted_log(self):
        trace, pooled = logged_run(t_max=3)
        log = trace.oracle_log
        corrupted = False
        for t in range(trace.config.t_max):
            for h in range(trace.config.hidden_neurons):
                if log.round_sets[t][h].size >= 2 and log.round_start_active[t][h].size:
                    log.round_start_active[t][h] = log.round_start_active[t][h][:0]
                    corrupted = True
                    break
            if corrupted:
                break
        assert corrupted
        assert verify_start_coverage(trace, pooled).n_violations > 0


class TestIsolatedRecovery:
    def test_full_recovery_on_random_run(self):
        trace, pooled = logged_run(seed=3, t_max=6)
        report = verify_isolated_recovery(trace, DataPrior.binary(), pooled)
        assert report.n_isolated > 0
        assert report.n_recovered == report.n_isolated
        assert report.n_snapped_exact == report.n_isolated
        assert report.max_error < 1e-9
        assert report.all_prior_members

    def test_no_singletons_empty_report(self):
        # one-round run over a single dead model: zero learning rate
        config = TrainingConfig(
            n_clients=2, dataset_size_per_client=6, batch_size=3, n_updates=1,
            t_max=1, learning_rate=0.0, seed=4, hidden_neurons=8, input_dim=12,
            n_outputs=2, oracle_logging=True)
        ds = generate_synthetic(SyntheticSpec("binary", d=12, n=12, classes=2, seed=5))
        part = partition_iid(ds, 2, seed=5, samples_per_client=6)
        pooled = ds.with_partition(part)
        trace = run_training(config, pooled, part)
        report = verify_isolated_recovery(trace, DataPrior.binary(), pooled)
        assert report.n_isolated == 0 and report.n_recovered == 0
        assert report.max_error == 0.0
