import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedspectral.errors import ContractError, DimensionError
from fedspectral.nn import LayerUpdate
from fedspectral import scoring
from fedspectral.scoring import ContributionState, EntropyMode


def entropy_oracle(m, mode):
    """Independent route: LAPACK eigendecomposition plus a Shannon sum."""
    a = m @ m.T
    if mode is EntropyMode.TRACE:
        a = a / np.trace(a)
    else:
        a = a / np.linalg.norm(a)
    eigs = np.linalg.eigvalsh(a)
    eigs = eigs[eigs > 0.0]
    return float(-np.sum(eigs * np.log(eigs)))


class TestSpectralEntropy:
    def test_orthonormal_rows_trace_mode(self):
        m = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert scoring.spectral_entropy(m) == pytest.approx(math.log(2), abs=1e-12)

    def test_rank_one_trace_mode(self):
        m = np.array([[2.0, -1.0, 3.0], [0.0, 0.0, 0.0]])
        assert scoring.spectral_entropy(m) == pytest.approx(0.0, abs=1e-12)

    def test_zero_matrix_degenerate(self):
        assert scoring.spectral_entropy(np.zeros((3, 5))) == 0.0

    @pytest.mark.parametrize("mode", [EntropyMode.TRACE, EntropyMode.FROBENIUS])
    def test_matches_independent_oracle(self, mode):
        rng = np.random.default_rng(50)
        for _ in range(20):
            m = rng.normal(size=(3, 8))
            got = scoring.spectral_entropy(m, mode)
            assert got == pytest.approx(entropy_oracle(m, mode), abs=1e-8)

    @pytest.mark.parametrize("mode", [EntropyMode.TRACE, EntropyMode.FROBENIUS])
    def test_scale_and_sign_invariance(self, mode):
        rng = np.random.default_rng(51)
        m = rng.normal(size=(4, 7))
        base = scoring.spectral_entropy(m, mode)
        for c in (5.0, 0.01, -3.0):
            assert scoring.spectral_entropy(c * m, mode) == pytest.approx(base, abs=1e-9)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(52)
        m = rng.normal(size=(5, 9))
        perm = rng.permutation(5)
        for mode in EntropyMode:
            assert scoring.spectral_entropy(m[perm], mode) == pytest.approx(
                scoring.spectral_entropy(m, mode), abs=1e-9
            )

    def test_trace_mode_bounds(self):
        rng = np.random.default_rng(53)
        for _ in range(10):
            c = int(rng.integers(2, 8))
            m = rng.normal(size=(c, c + 4))
            s = scoring.spectral_entropy(m)
            assert -1e-12 <= s <= math.log(c) + 1e-12

    def test_max_entropy_for_scaled_orthonormal_rows(self):
        # M M^T proportional to the identity attains the log C ceiling.
        q, _ = np.linalg.qr(np.random.default_rng(54).normal(size=(6, 4)))
        m = 3.7 * q.T
        assert scoring.spectral_entropy(m) == pytest.approx(math.log(4), abs=1e-10)


class TestCssv:
    def test_identical_updates(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert scoring.cssv(m, m) == pytest.approx(1.0)

    def test_rowwise_orthogonal(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert scoring.cssv(a, b) == pytest.approx(0.0)

    def test_mixed_signs_cancel(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.array([[1.0, 0.0], [0.0, -1.0]])
        assert scoring.cssv(a, b) == pytest.approx(0.0)

    def test_zero_row_contributes_zero(self):
        a = np.array([[0.0, 0.0], [0.0, 1.0]])
        b = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert scoring.cssv(a, b) == pytest.approx(0.5)

    def test_row_rescaling_invariance(self):
        rng = np.random.default_rng(60)
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(4, 6))
        scales = rng.uniform(0.1, 10.0, size=4)
        assert scoring.cssv(a * scales[:, None], b) == pytest.approx(
            scoring.cssv(a, b), abs=1e-12
        )

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(61)
        a = rng.normal(size=(5, 6))
        b = rng.normal(size=(5, 6))
        perm = rng.permutation(5)
        assert scoring.cssv(a[perm], b[perm]) == pytest.approx(scoring.cssv(a, b), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            scoring.cssv(np.ones((2, 3)), np.ones((3, 2)))


def update_of(arrays):
    return LayerUpdate([(w.copy(), b.copy()) for w, b in arrays])


class TestCgsv:
    def pair(self, seed):
        rng = np.random.default_rng(seed)
        layers = [(rng.normal(size=(4, 3)), rng.normal(size=4)), (rng.normal(size=(2, 4)), rng.normal(size=2))]
        return update_of(layers)

    def test_identical(self):
        u = self.pair(70)
        assert scoring.cgsv_score(u, u) == pytest.approx(1.0)

    def test_negated(self):
        u = self.pair(71)
        neg = update_of([(-w, -b) for w, b in u.deltas])
        assert scoring.cgsv_score(u, neg) == pytest.approx(-1.0)

    def test_matches_flatten_oracle(self):
        a = self.pair(72)
        b = self.pair(73)
        flat_a = np.concatenate([np.concatenate([w.ravel(), bb.ravel()]) for w, bb in a.deltas])
        flat_b = np.concatenate([np.concatenate([w.ravel(), bb.ravel()]) for w, bb in b.deltas])
        want = float(flat_a @ flat_b / (np.linalg.norm(flat_a) * np.linalg.norm(flat_b)))
        assert scoring.cgsv_score(a, b) == pytest.approx(want, abs=1e-12)

    def test_global_rescale_invariance(self):
        a = self.pair(74)
        b = self.pair(75)
        a_scaled = update_of([(3.5 * w, 3.5 * bb) for w, bb in a.deltas])
        b_scaled = update_of([(3.5 * w, 3.5 * bb) for w, bb in b.deltas])
        assert scoring.cgsv_score(a_scaled, b_scaled) == pytest.approx(
            scoring.cgsv_score(a, b), abs=1e-12
        )

    def test_shape_mismatch(self):
        a = self.pair(76)
        b = update_of([(np.ones((4, 3)), np.ones(4))])
        with pytest.raises(DimensionError):
            scoring.cgsv_score(a, b)


class TestEma:
    def test_first_observation_passes_through(self):
        state = ContributionState.create(3, momentum=0.9)
        assert scoring.ema_update(state, 0, 0.7, "entropy") == pytest.approx(0.7)

    def test_formula(self):
        state = ContributionState.create(2, momentum=0.9)
        scoring.ema_update(state, 1, 1.0, "cssv")
        assert scoring.ema_update(state, 1, 0.0, "cssv") == pytest.approx(0.9)

    def test_zero_momentum_tracks_raw(self):
        state = ContributionState.create(2, momentum=0.0)
        scoring.ema_update(state, 0, 0.3, "cgsv")
        assert scoring.ema_update(state, 0, 0.8, "cgsv") == pytest.approx(0.8)

    def test_signals_independent_per_client(self):
        state = ContributionState.create(2, momentum=0.5)
        scoring.ema_update(state, 0, 1.0, "entropy")
        assert scoring.ema_update(state, 1, 2.0, "entropy") == pytest.approx(2.0)
        assert scoring.ema_update(state, 0, 0.0, "cssv") == pytest.approx(0.0)

    def test_non_finite_rejected(self):
        state = ContributionState.create(2, momentum=0.9)
        scoring.ema_update(state, 0, 0.5, "entropy")
        assert scoring.ema_update(state, 0, float("nan"), "entropy") == pytest.approx(0.5)
        assert state.entropy[0] == pytest.approx(0.5)

    def test_invalid_momentum(self):
        with pytest.raises(ContractError):
            ContributionState.create(2, momentum=1.0)

    def test_unknown_signal(self):
        state = ContributionState.create(2, momentum=0.5)
        with pytest.raises(ContractError):
            scoring.ema_update(state, 0, 1.0, "loss")


class TestNormalizeScores:
    def test_uniform(self):
        np.testing.assert_allclose(scoring.normalize_scores([1.0, 1.0, 1.0, 1.0]), [0.25] * 4)

    def test_proportional(self):
        np.testing.assert_allclose(scoring.normalize_scores([2.0, 1.0, 1.0]), [0.5, 0.25, 0.25])

    def test_clamp_then_divide_exact(self):
        got = scoring.normalize_scores([-0.5, 1.0], floor=1e-6)
        np.testing.assert_allclose(got, [1e-6 / 1.000001, 1.0 / 1.000001], rtol=0, atol=0)

    def test_all_degenerate_uniform(self):
        np.testing.assert_allclose(scoring.normalize_scores([0.0, -1.0, 0.0]), [1 / 3] * 3)

    def test_sums_to_one(self):
        rng = np.random.default_rng(80)
        for _ in range(10):
            v = rng.normal(size=6)
            out = scoring.normalize_scores(v)
            assert out.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(out > 0.0)

    @given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=8), st.floats(1e-3, 1e3))
    @settings(max_examples=60)
    def test_positive_scale_invariance(self, values, c):
        base = scoring.normalize_scores(values)
        scaled = scoring.normalize_scores([c * v for v in values])
        np.testing.assert_allclose(scaled, base, atol=1e-12)

    def test_invalid_floor(self):
        with pytest.raises(ContractError):
            scoring.normalize_scores([1.0], floor=0.0)
