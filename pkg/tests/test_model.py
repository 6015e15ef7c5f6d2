"""Model forward/loss/gradient checks against independent oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedleak import model
from fedleak.model import HeadLayer, ModelParams


def make_params(rng, d=7, hidden=5, head_widths=(), n_outputs=3):
    return model.init_params(rng, d, hidden, head_widths, n_outputs)


def naive_forward(params, x):
    """Loop-based re-computation of the forward pass (test oracle)."""
    H, d = params.W.shape
    z = []
    for h in range(H):
        pre = sum(params.W[h, j] * x[j] for j in range(d)) + params.b[h]
        z.append(pre if pre > 0 else 0.0)
    a = z
    for i, (V, c) in enumerate(params.head):
        nxt = []
        for o in range(V.shape[0]):
            val = sum(V[o, j] * a[j] for j in range(V.shape[1])) + c[o]
            if i < len(params.head) - 1 and val < 0:
                val = 0.0
            nxt.append(val)
        a = nxt
    return np.array(a)


def random_survival_labels(rng, n, event_prob=0.7):
    times = rng.exponential(1.0, size=n) + 0.01
    events = rng.random(n) < event_prob
    if not events.any():
        events[0] = True
    return times, events


class TestForward:
    def test_zero_params_identity_head(self):
        d = 4
        params = ModelParams(
            np.zeros((d, d)), np.zeros(d), (HeadLayer(np.eye(d), np.zeros(d)),)
        )
        out = model.forward(params, np.ones(d))
        assert np.array_equal(out, np.zeros(d))

    def test_relu_gating_identity(self):
        params = ModelParams(
            np.eye(2), np.zeros(2), (HeadLayer(np.eye(2), np.zeros(2)),)
        )
        out = model.forward(params, np.array([1.0, -1.0]))
        assert np.array_equal(out, np.array([1.0, 0.0]))

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            params = make_params(rng, d=6, hidden=4, head_widths=(5,), n_outputs=3)
            x = rng.normal(size=6)
            np.testing.assert_allclose(
                model.forward(params, x), naive_forward(params, x), rtol=1e-12
            )

    def test_dimension_mismatch(self):
        params = make_params(np.random.default_rng(1))
        with pytest.raises(ValueError):
            model.forward(params, np.zeros(3))

    def test_preactivations_exposed(self):
        rng = np.random.default_rng(2)
        params = make_params(rng)
        x = rng.normal(size=7)
        _, pre = model.forward(params, x, return_preactivations=True)
        np.testing.assert_allclose(pre, params.W @ x + params.b, rtol=1e-15)

    def test_purity_bit_identical(self):
        rng = np.random.default_rng(3)
        params = make_params(rng)
        X = rng.normal(size=(5, 7))
        a = model.forward(params, X)
        b = model.forward(params, X)
        assert a.tobytes() == b.tobytes()


class TestParams:
    def test_extended_weights(self):
        rng = np.random.default_rng(4)
        params = make_params(rng)
        ext = params.extended_weights(2)
        assert ext.shape == (8,)
        assert np.array_equal(ext[:-1], params.W[2]) and ext[-1] == params.b[2]
        with pytest.raises(ValueError):
            params.extended_weights(5)

    def test_flatten_roundtrip(self):
        rng = np.random.default_rng(5)
        params = make_params(rng, d=6, hidden=4, head_widths=(3,), n_outputs=2)
        back = ModelParams.unflatten(params.flatten(), 6, 4, (3,), 2)
        assert np.array_equal(back.W, params.W)
        assert np.array_equal(back.b, params.b)
        for (V, c), (V2, c2) in zip(params.head, back.head):
            assert np.array_equal(V, V2) and np.array_equal(c, c2)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ModelParams(np.zeros((3, 2)), np.zeros(4), (HeadLayer(np.zeros((1, 3)), np.zeros(1)),))


class TestLoss:
    def test_uniform_logits_give_log2(self):
        # zero head output over 2 classes -> uniform prediction -> ln 2
        params = ModelParams(
            np.zeros((3, 4)), np.zeros(3), (HeadLayer(np.zeros((2, 3)), np.zeros(2)),)
        )
        value, degenerate = model.loss(params, np.ones((1, 4)), [1], "cross_entropy")
        assert value == pytest.approx(math.log(2.0), rel=1e-12)
        assert not degenerate

    def test_cross_entropy_sums_over_batch(self):
        params = ModelParams(
            np.zeros((3, 4)), np.zeros(3), (HeadLayer(np.zeros((2, 3)), np.zeros(2)),)
        )
        value, _ = model.loss(params, np.ones((5, 4)), [0] * 5, "cross_entropy")
        assert value == pytest.approx(5 * math.log(2.0), rel=1e-12)

    def test_cox_single_admissible_element_is_zero(self):
        # one event whose risk set is itself only -> s_i - log exp(s_i) = 0
        rng = np.random.default_rng(6)
        params = make_params(rng, d=5, hidden=4, n_outputs=1)
        X = rng.normal(size=(3, 5))
        times = np.array([5.0, 1.0, 2.0])
        events = np.array([True, False, False])
        value, degenerate = model.loss(params, X, (times, events), "cox")
        assert value == pytest.approx(0.0, abs=1e-12)
        assert not degenerate

    def test_cox_degenerate_without_events(self):
        rng = np.random.default_rng(7)
        params = make_params(rng, d=5, hidden=4, n_outputs=1)
        X = rng.normal(size=(3, 5))
        value, degenerate = model.loss(
            params, X, (np.ones(3), np.zeros(3, dtype=bool)), "cox"
        )
        assert value == 0.0
        assert degenerate
        g = model.gradients(params, X, (np.ones(3), np.zeros(3, dtype=bool)), "cox")
        assert not g.dW.any() and not g.db.any()

    def test_empty_batch_rejected(self):
        params = make_params(np.random.default_rng(8))
        with pytest.raises(ValueError):
            model.loss(params, np.zeros((0, 7)), [], "cross_entropy")

    def test_unknown_kind_rejected(self):
        params = make_params(np.random.default_rng(9))
        with pytest.raises(ValueError):
            model.loss(params, np.zeros((1, 7)), [0], "hinge")


def finite_difference_gradient(params, X, y, loss_kind, step=1e-6):
    """Central finite differences of the batch loss over the flat parameters."""
    d, hidden = params.input_dim, params.hidden_neurons
    widths = tuple(V.shape[0] for V, _ in params.head[:-1])
    n_out = params.n_outputs
    theta = params.flatten()
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[j] += step
        down[j] -= step
        lu, _ = model.loss(ModelParams.unflatten(up, d, hidden, widths, n_out), X, y, loss_kind)
        ld, _ = model.loss(ModelParams.unflatten(down, d, hidden, widths, n_out), X, y, loss_kind)
        grad[j] = (lu - ld) / (2 * step)
    return grad


def analytic_flat_gradient(params, X, y, loss_kind):
    g = model.gradients(params, X, y, loss_kind)
    parts = [g.dW.ravel(), g.db]
    for dV, dc in g.dhead:
        parts.extend([dV.ravel(), dc])
    return np.concatenate(parts)


def _instance_away_from_kinks(rng, loss_kind, head_widths):
    """Random instance whose pre-activations are clear of the ReLU kink."""
    while True:
        params = make_params(
            rng, d=5, hidden=4, head_widths=head_widths,
            n_outputs=1 if loss_kind == "cox" else 3,
        )
        X = rng.normal(size=(4, 5))
        pre1 = X @ params.W.T + params.b
        z = np.maximum(pre1, 0)
        kink = np.abs(pre1).min() < 1e-3
        for V, c in params.head[:-1]:
            p = z @ V.T + c
            kink = kink or np.abs(p).min() < 1e-3
            z = np.maximum(p, 0)
        if kink:
            continue
        if loss_kind == "cox":
            y = random_survival_labels(rng, 4)
        else:
            y = rng.integers(0, 3, size=4)
        return params, X, y


class TestGradientsFiniteDifference:
    @pytest.mark.parametrize("loss_kind,head_widths", [
        ("cross_entropy", ()),
        ("cross_entropy", (6,)),
        ("cox", ()),
        ("cox", (6,)),
    ])
    def test_matches_central_differences(self, loss_kind, head_widths):
        rng = np.random.default_rng(10)
        for _ in range(25):  # 25 x 4 parametrizations = 100 random instances
            params, X, y = _instance_away_from_kinks(rng, loss_kind, head_widths)
            an = analytic_flat_gradient(params, X, y, loss_kind)
            fd = finite_difference_gradient(params, X, y, loss_kind)
            assert np.abs(fd - an).max() <= 1e-5 * max(1.0, np.abs(an).max())


class TestFirstLayerGradients:
    def test_dead_neuron_row_is_zero(self):
        rng = np.random.default_rng(11)
        params = make_params(rng, d=3, hidden=2, n_outputs=2)
        # bias pushed far negative: no sample activates neuron 0
        W = params.W.copy()
        b = params.b.copy()
        b[0] = -100.0
        params = ModelParams(W, b, params.head)
        X = rng.normal(size=(4, 3))
        flg = model.first_layer_gradients(params, X, rng.integers(0, 2, 4), "cross_entropy")
        assert flg.lambdas[0] == []
        assert not flg.dW[0].any() and flg.db[0] == 0.0

    def test_single_sample_row_is_lambda_times_x(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            params = make_params(rng, d=6, hidden=3, n_outputs=2)
            x = rng.normal(size=6)
            flg = model.first_layer_gradients(params, x[None, :], [1], "cross_entropy")
            for h in range(3):
                if flg.lambdas[h]:
                    ((_, lam),) = flg.lambdas[h]
                    assert np.array_equal(flg.dW[h], lam * x)
                    assert flg.db[h] == lam

    def test_listed_lambdas_are_nonzero(self):
        rng = np.random.default_rng(13)
        params = make_params(rng)
        X = rng.normal(size=(6, 7))
        flg = model.first_layer_gradients(params, X, rng.integers(0, 3, 6), "cross_entropy")
        for pairs in flg.lambdas.values():
            assert all(lam != 0.0 for _, lam in pairs)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        params, X, y = _instance_away_from_kinks(rng, "cross_entropy", ())
        flg = model.first_layer_gradients(params, X, y, "cross_entropy")
        fd = finite_difference_gradient(params, X, y, "cross_entropy")
        n_first = params.W.size + params.b.size
        an = np.concatenate([flg.dW.ravel(), flg.db])
        assert np.abs(fd[:n_first] - an).max() <= 1e-5 * max(1.0, np.abs(an).max())


class TestBatchActivationSet:
    def test_all_negative_preactivations(self):
        params = ModelParams(
            np.ones((2, 3)), np.full(2, -100.0), (HeadLayer(np.ones((2, 2)), np.zeros(2)),)
        )
        got = model.batch_activation_set(params, np.ones((4, 3)), [0, 1, 0, 1], 0, "cross_entropy")
        assert got == set()

    def test_zero_head_kills_membership(self):
        # positive pre-activations, but the head never feeds them to the loss
        params = ModelParams(
            np.ones((2, 3)), np.ones(2), (HeadLayer(np.zeros((2, 2)), np.zeros(2)),)
        )
        got = model.batch_activation_set(params, np.ones((4, 3)), [0, 1, 0, 1], 0, "cross_entropy")
        assert got == set()

    def test_consistent_with_first_layer_gradients(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            params = make_params(rng, d=6, hidden=5, n_outputs=3)
            X = rng.normal(size=(8, 6))
            y = rng.integers(0, 3, 8)
            flg = model.first_layer_gradients(params, X, y, "cross_entropy")
            for h in range(5):
                got = model.batch_activation_set(params, X, y, h, "cross_entropy")
                assert got == {i for i, _ in flg.lambdas[h]}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), cox=st.booleans())
def test_gradient_decomposition_identity(seed, cox):
    """dW[h] == sum(lam * x) and db[h] == sum(lam) over the activation set."""
    rng = np.random.default_rng(seed)
    loss_kind = "cox" if cox else "cross_entropy"
    n_out = 1 if cox else 3
    params = make_params(rng, d=6, hidden=5, head_widths=(4,), n_outputs=n_out)
    n = int(rng.integers(1, 9))
    X = rng.normal(size=(n, 6))
    y = random_survival_labels(rng, n) if cox else rng.integers(0, 3, n)
    ids = np.arange(n)
    flg = model.first_layer_gradients(params, X, y, loss_kind, sample_ids=ids)
    for h in range(5):
        rec_W = np.zeros(6)
        rec_b = 0.0
        for i, lam in flg.lambdas[h]:
            rec_W += lam * X[i]
            rec_b += lam
        scale = max(np.abs(flg.dW[h]).max(), abs(flg.db[h]), 1e-30)
        assert np.abs(rec_W - flg.dW[h]).max() <= 1e-10 * scale
        assert abs(rec_b - flg.db[h]) <= 1e-10 * scale
