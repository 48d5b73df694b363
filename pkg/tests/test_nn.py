import numpy as np
import pytest

from fedspectral.data import Dataset, generate_blobs, holdout_split
from fedspectral.errors import ContractError, DimensionError, InsufficientDataError
from fedspectral import nn


def make_params(layer_dims, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        layers.append(
            (scale * rng.normal(size=(fan_out, fan_in)), scale * rng.normal(size=fan_out))
        )
    return nn.ModelParams(layers)


def forward_oracle(params, x):
    """Hand-unrolled scalar-loop forward pass."""
    a = list(x)
    for k, (w, b) in enumerate(params.layers):
        out = []
        for i in range(w.shape[0]):
            acc = b[i]
            for j in range(w.shape[1]):
                acc += w[i, j] * a[j]
            if k < len(params.layers) - 1:
                acc = max(acc, 0.0)
            out.append(acc)
        a = out
    return np.asarray(a)


class TestForward:
    def test_zero_params_zero_scores(self):
        params = nn.ModelParams([(np.zeros((3, 4)), np.zeros(3))])
        assert np.array_equal(nn.forward(params, np.ones(4)), np.zeros(3))

    def test_identity_layer(self):
        params = nn.ModelParams([(np.eye(2), np.zeros(2))])
        np.testing.assert_allclose(nn.forward(params, [1.0, 2.0]), [1.0, 2.0])

    def test_matches_hand_unrolled_oracle(self):
        params = make_params([5, 7, 3], seed=1)
        rng = np.random.default_rng(2)
        for _ in range(5):
            x = rng.normal(size=5)
            np.testing.assert_allclose(nn.forward(params, x), forward_oracle(params, x), atol=1e-12)

    def test_batch_matches_single(self):
        params = make_params([4, 6, 2], seed=3)
        xs = np.random.default_rng(4).normal(size=(3, 4))
        batch = nn.forward(params, xs)
        for i in range(3):
            np.testing.assert_allclose(batch[i], nn.forward(params, xs[i]))

    def test_dimension_mismatch(self):
        params = make_params([4, 2], seed=5)
        with pytest.raises(DimensionError):
            nn.forward(params, np.ones(3))


class TestSchedule:
    SPEC = nn.TrainSpec(1, 64, 0.1, 0.0, total_rounds=3, seed=0)

    def test_first_round_initial(self):
        assert nn.lr_schedule(self.SPEC, 1) == pytest.approx(0.1)

    def test_last_round_final(self):
        assert nn.lr_schedule(self.SPEC, 3) == pytest.approx(0.0)

    def test_midpoint(self):
        assert nn.lr_schedule(self.SPEC, 2) == pytest.approx(0.05)

    def test_single_round(self):
        spec = nn.TrainSpec(1, 64, 0.1, 0.0, total_rounds=1, seed=0)
        assert nn.lr_schedule(spec, 1) == pytest.approx(0.1)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            nn.lr_schedule(self.SPEC, 0)
        with pytest.raises(ContractError):
            nn.lr_schedule(self.SPEC, 4)


class TestTrainLocal:
    def shard(self, seed=0):
        return generate_blobs(2, 4, 30, 3.0, seed=seed)

    def test_zero_lr_is_identity(self):
        params = nn.init_params([4, 8, 2], seed=1)
        spec = nn.TrainSpec(2, 16, 1e-9, 0.0, total_rounds=2, seed=1)
        new, update, loss = nn.train_local(params, self.shard(), spec, round_index=2)
        # Round 2 of 2 hits lr_final = 0 exactly.
        for (w0, b0), (w1, b1) in zip(params.layers, new.layers):
            assert np.array_equal(w0, w1)
            assert np.array_equal(b0, b1)
        assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in update.deltas)
        assert loss > 0.0

    def test_deterministic(self):
        params = nn.init_params([4, 8, 2], seed=2)
        spec = nn.TrainSpec(2, 8, 0.1, 0.0, total_rounds=5, seed=7)
        a = nn.train_local(params, self.shard(), spec, round_index=3, client_id=1)
        b = nn.train_local(params, self.shard(), spec, round_index=3, client_id=1)
        for (wa, ba), (wb, bb) in zip(a[0].layers, b[0].layers):
            assert np.array_equal(wa, wb)
            assert np.array_equal(ba, bb)
        assert a[2] == b[2]

    def test_update_sign_convention(self):
        params = nn.init_params([4, 8, 2], seed=3)
        spec = nn.TrainSpec(1, 8, 0.1, 0.1, total_rounds=1, seed=3)
        new, update, _ = nn.train_local(params, self.shard(), spec, round_index=1)
        for (wn, bn), (wo, bo), (dw, db) in zip(new.layers, params.layers, update.deltas):
            np.testing.assert_allclose(dw, wn - wo, atol=0)
            np.testing.assert_allclose(db, bn - bo, atol=0)

    def test_loss_decreases_on_separable_blobs(self):
        shard = self.shard(seed=9)
        params = nn.init_params([4, 8, 2], seed=9)
        spec = nn.TrainSpec(1, 10, 0.05, 0.05, total_rounds=20, seed=9)
        losses = []
        for t in range(1, 21):
            params, _, loss = nn.train_local(params, shard, spec, round_index=t)
            losses.append(loss)
        drops = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
        assert drops >= 0.9 * (len(losses) - 1)
        assert losses[-1] < losses[0]

    def test_empty_shard_rejected(self):
        params = nn.init_params([4, 8, 2], seed=4)
        spec = nn.TrainSpec(1, 8, 0.1, 0.0, total_rounds=1, seed=4)
        empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), 2)
        with pytest.raises(InsufficientDataError):
            nn.train_local(params, empty, spec, round_index=1)


class TestEvaluate:
    def test_fixed_winner_scores_class_share(self):
        # Output bias strongly favors class 0 regardless of input.
        params = nn.ModelParams([(np.zeros((2, 3)), np.array([10.0, 0.0]))])
        labels = np.array([0] * 3 + [1] * 7)
        test = Dataset(np.random.default_rng(0).normal(size=(10, 3)), labels, 2)
        assert nn.evaluate(params, test) == pytest.approx(0.3)

    def test_all_zero_model_tie_breaks_to_class_zero(self):
        params = nn.ModelParams([(np.zeros((10, 4)), np.zeros(10))])
        labels = np.repeat(np.arange(10), 3)
        test = Dataset(np.random.default_rng(1).normal(size=(30, 4)), labels, 10)
        assert nn.evaluate(params, test) == pytest.approx(0.1)

    def test_wide_separation_trains_to_high_accuracy(self):
        ds = generate_blobs(3, 8, 80, 20.0, seed=5)
        train, test = holdout_split(ds, 0.25, seed=5)
        params = nn.init_params([8, 3], seed=5)
        spec = nn.TrainSpec(3, 16, 0.1, 0.01, total_rounds=10, seed=5)
        for t in range(1, 11):
            params, _, _ = nn.train_local(params, train, spec, round_index=t)
        assert nn.evaluate(params, test) >= 0.99

    def test_empty_test_rejected(self):
        params = nn.ModelParams([(np.zeros((2, 2)), np.zeros(2))])
        empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), 2)
        with pytest.raises(InsufficientDataError):
            nn.evaluate(params, empty)


class TestGradients:
    def test_analytic_matches_central_differences(self):
        params = make_params([4, 6, 3], seed=11, scale=0.7)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(5, 4))
        y = rng.integers(0, 3, size=5)
        _, grads = nn.loss_and_gradients(params, x, y)

        h = 1e-5
        for k, (w, b) in enumerate(params.layers):
            for arr, grad in ((w, grads[k][0]), (b, grads[k][1])):
                it = np.nditer(arr, flags=["multi_index"])
                while not it.finished:
                    idx = it.multi_index
                    orig = arr[idx]
                    arr[idx] = orig + h
                    up, _ = nn.loss_and_gradients(params, x, y)
                    arr[idx] = orig - h
                    down, _ = nn.loss_and_gradients(params, x, y)
                    arr[idx] = orig
                    fd = (up - down) / (2 * h)
                    a = grad[idx]
                    rel = abs(a - fd) / max(abs(a), abs(fd), 1.0)
                    assert rel <= 1e-4, f"layer {k} coord {idx}: analytic {a} vs fd {fd}"
                    assert abs(a - fd) <= 1e-7
                    it.iternext()

    def test_loss_matches_direct_cross_entropy(self):
        params = make_params([3, 4, 2], seed=13)
        rng = np.random.default_rng(14)
        x = rng.normal(size=(6, 3))
        y = rng.integers(0, 2, size=6)
        loss, _ = nn.loss_and_gradients(params, x, y)
        scores = nn.forward(params, x)
        probs = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
        want = -np.mean(np.log(probs[np.arange(6), y]))
        assert loss == pytest.approx(want, abs=1e-12)


class TestInit:
    def test_bounds_follow_fan_in(self):
        params = nn.init_params([16, 64, 10], seed=6)
        (w1, b1), (w2, b2) = params.layers
        assert np.max(np.abs(w1)) <= 1 / 4
        assert np.max(np.abs(b1)) <= 1 / 4
        assert np.max(np.abs(w2)) <= 1 / 8
        assert np.max(np.abs(b2)) <= 1 / 8

    def test_deterministic(self):
        a = nn.init_params([4, 8, 2], seed=9)
        b = nn.init_params([4, 8, 2], seed=9)
        for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
            assert np.array_equal(wa, wb)
            assert np.array_equal(ba, bb)

    def test_dim_chain_validated(self):
        with pytest.raises(DimensionError):
            nn.ModelParams([(np.zeros((3, 4)), np.zeros(3)), (np.zeros((2, 5)), np.zeros(2))])
