import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbvi.kernel import (BufferSlice, SmootherParams, TransitionBuffer, estimate_expectation,
                         estimate_variance, generalized_count, kernel_eval, merge_or_insert,
                         normalized_weights, raw_weight)
from kbvi.metric import PER_ACTION, ProductMetric


def make_slice(queries, nexts, actions=None):
    """One representative per sample, no merging."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    a = np.zeros(len(q), dtype=int) if actions is None else np.asarray(actions)
    return BufferSlice(q, a, np.arange(len(q)), np.atleast_2d(np.asarray(nexts, dtype=float)))


EMPTY = BufferSlice(np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros((0, 2)))


def random_buffer(rng, n, spread=0.1):
    buf = TransitionBuffer(1, 2, merge_threshold=0.0)
    for _ in range(n):
        s = rng.uniform(-spread, spread, 2)
        buf.merge_or_insert(1, s, int(rng.integers(0, 2)), s + rng.normal(0, 0.1, 2))
    return buf[1]


class TestKernel:
    def test_values(self):
        assert kernel_eval(0) == 1.0
        assert kernel_eval(1) == pytest.approx(0.6065306597126334, abs=1e-15)
        assert kernel_eval(4) == pytest.approx(3.3546262790251185e-4, rel=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            kernel_eval(-0.1)

    def test_monotone_and_bounded(self):
        z = np.linspace(0, 10, 1001)
        g = np.array([kernel_eval(x) for x in z])
        assert np.all(np.diff(g) <= 0)
        assert np.all((g >= 0) & (g <= 1))

    def test_derivative_bound_constant(self):
        z = np.linspace(0, 6, 60001)
        deriv = z * np.exp(-z ** 2 / 2)
        assert deriv.max() == pytest.approx(math.exp(-0.5), abs=1e-8)


class TestWeights:
    p = SmootherParams(sigma=0.1, beta=0.05)

    def test_raw_weight_identity(self):
        assert raw_weight(((0.2, 0.3), 1), ((0.2, 0.3), 1), self.p) == 1.0

    def test_raw_weight_at_bandwidth(self):
        assert raw_weight(((0, 0), 0), ((0.1, 0), 0), self.p) == pytest.approx(math.exp(-0.5), rel=1e-12)

    def test_raw_weight_far_is_zero(self):
        # exp(-50) is below the sparsity cutoff
        assert raw_weight(((0, 0), 0), ((1.0, 0), 0), self.p) < 1e-21

    def test_per_action_blocks_other_actions(self):
        assert raw_weight(((0, 0), 0), ((0, 0), 1), self.p, ProductMetric(PER_ACTION)) == 0.0

    def test_count_empty(self):
        assert generalized_count(((0, 0), 0), EMPTY, self.p) == 0.05

    def test_count_single_at_query(self):
        assert generalized_count(((0, 0), 0), make_slice([[0, 0]], [[1, 1]]), self.p) == pytest.approx(1.05)

    def test_count_two_at_bandwidth(self):
        p = SmootherParams(sigma=0.1, beta=0.01)
        buf = make_slice([[0.1, 0], [-0.1, 0]], [[0, 0], [0, 0]])
        assert generalized_count(((0, 0), 0), buf, p) == pytest.approx(0.01 + 2 * math.exp(-0.5), rel=1e-12)
        assert generalized_count(((0, 0), 0), buf, p) == pytest.approx(1.2231, abs=1e-4)

    def test_normalized_empty(self):
        assert normalized_weights(((0, 0), 0), EMPTY, self.p).sum() == 0

    def test_normalized_single_beta_one(self):
        w = normalized_weights(((0, 0), 0), make_slice([[0, 0]], [[1, 1]]), SmootherParams(0.1, 1.0))
        np.testing.assert_allclose(w, [0.5])

    def test_normalized_symmetric(self):
        buf = make_slice([[0.05, 0], [0, -0.05]], [[0, 0], [0, 0]])
        w = normalized_weights(((0, 0), 0), buf, self.p)
        assert w[0] == pytest.approx(w[1], rel=1e-14)

    def test_multiplicity_counts(self):
        buf = TransitionBuffer(1, 2, merge_threshold=0.02)
        for _ in range(3):
            buf.merge_or_insert(1, (0, 0), 0, (1, 1))
        assert buf[1].n_reps == 1
        assert generalized_count(((0, 0), 0), buf[1], self.p) == pytest.approx(3.05)


class TestEstimators:
    def test_constant_function_scaled_by_mass(self):
        w = np.array([0.2, 0.3])
        assert estimate_expectation([4.0, 4.0], w) == pytest.approx(2.0)

    def test_hand_value(self):
        p = SmootherParams(sigma=0.1, beta=0.01)
        buf = make_slice([[0, 0], [0, 0]], [[0, 0], [1, 1]])
        w = normalized_weights(((0, 0), 0), buf, p)
        assert estimate_expectation([0.0, 1.0], w) == pytest.approx(1 / 2.01, rel=1e-12)
        assert estimate_expectation([0.0, 1.0], w) == pytest.approx(0.49751, abs=1e-5)

    def test_empty(self):
        assert estimate_expectation([], []) == 0
        assert estimate_variance([], []) == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            estimate_expectation([1.0, 2.0], [0.5])
        with pytest.raises(ValueError):
            estimate_variance([1.0], [0.5, 0.5])

    def test_single_sample_variance(self):
        w = np.array([1 / 1.01])
        expected = (1 / 1.01) * (1 - 1 / 1.01) ** 2
        assert estimate_variance([1.0], w) == pytest.approx(expected, rel=1e-12)
        assert estimate_variance([1.0], w) == pytest.approx(9.707e-5, rel=1e-3)

    def test_constant_variance_vanishes_with_beta(self):
        buf = make_slice([[0, 0], [0.01, 0]], [[0, 0], [0, 0]])
        vals = []
        for beta in (1.0, 0.1, 0.01, 1e-4, 1e-8):
            w = normalized_weights(((0, 0), 0), buf, SmootherParams(0.1, beta))
            vals.append(estimate_variance([3.0, 3.0], w))
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-12

    def test_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 20))
            w = rng.dirichlet(np.ones(n + 1))[:n]
            f = rng.normal(0, 3, n)
            m = estimate_expectation(f, w)
            assert w.sum() * f.min() - 1e-12 <= m <= w.sum() * f.max() + 1e-12
            lo, hi = min(f.min(), m), max(f.max(), m)
            assert 0 <= estimate_variance(f, w) <= (hi - lo) ** 2 + 1e-12


class TestInvariants:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 40), st.floats(1e-3, 1.0), st.floats(0.01, 0.5), st.integers(0, 2 ** 32 - 1))
    def test_mass_identity(self, n, beta, sigma, seed):
        rng = np.random.default_rng(seed)
        buf = random_buffer(rng, n)
        p = SmootherParams(sigma, beta)
        q = (rng.uniform(-0.1, 0.1, 2), int(rng.integers(0, 2)))
        for metric in (ProductMetric(), ProductMetric(PER_ACTION)):
            w = normalized_weights(q, buf, p, metric)
            c = generalized_count(q, buf, p, metric)
            assert w.sum() + beta / c == pytest.approx(1.0, abs=1e-12)
            assert np.all((w >= 0) & (w < 1))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2 ** 32 - 1))
    def test_variance_identity(self, n, seed):
        rng = np.random.default_rng(seed)
        buf = random_buffer(rng, n)
        w = normalized_weights((np.zeros(2), 0), buf, SmootherParams(0.05, 0.05))
        f = rng.normal(0, 5, n)
        m = estimate_expectation(f, w)
        v = estimate_variance(f, w)
        assert v >= 0
        assert v == pytest.approx(w @ f ** 2 - 2 * m * (w @ f) + w.sum() * m ** 2, abs=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 2 ** 32 - 1))
    def test_count_monotone(self, n, seed):
        rng = np.random.default_rng(seed)
        p = SmootherParams(0.05, 0.05)
        buf = TransitionBuffer(1, 2, merge_threshold=0.02)
        q = (np.zeros(2), 0)
        prev = generalized_count(q, buf[1], p)
        for _ in range(n):
            s = rng.uniform(-0.1, 0.1, 2)
            buf.merge_or_insert(1, s, int(rng.integers(0, 2)), s)
            cur = generalized_count(q, buf[1], p)
            assert cur >= prev
            prev = cur

    def test_weighted_distance_bound(self):
        # sum_l w_l rho_l <= 2 sigma (1 + sqrt(log(k / beta + e)))
        rng = np.random.default_rng(7)
        for trial in range(200):
            sigma, beta = rng.uniform(0.01, 0.3), rng.uniform(0.01, 1.0)
            n = int(rng.integers(1, 80))
            buf = random_buffer(rng, n, spread=rng.uniform(0.01, 1.0))
            q = (rng.uniform(-0.5, 0.5, 2), 0)
            w = normalized_weights(q, buf, SmootherParams(sigma, beta))
            sq, sa = buf.sample_points()
            rho = np.linalg.norm(sq - q[0], axis=1)
            k = n + 1
            assert w @ rho <= 2 * sigma * (1 + math.sqrt(math.log(k / beta + math.e))) + 1e-12

    def test_tabular_oracle_equivalence(self):
        # grid spacing 1, sigma = spacing / 100, beta tiny: kernel mean == count mean
        rng = np.random.default_rng(1)
        grid = np.array([[i, j] for i in range(3) for j in range(3)], dtype=float)
        buf = TransitionBuffer(1, 2, merge_threshold=0.0)
        for _ in range(200):
            s = grid[rng.integers(9)]
            buf.merge_or_insert(1, s, int(rng.integers(0, 2)), grid[rng.integers(9)])
        f_of = lambda pts: np.sin(pts[:, 0]) + pts[:, 1] ** 2
        view = buf[1]
        p = SmootherParams(sigma=0.01, beta=1e-8)
        sq, sa = view.sample_points()
        for s in grid:
            for a in (0, 1):
                match = np.all(sq == s, axis=1) & (sa == a)
                if not match.any():
                    continue
                w = normalized_weights((s, a), view, p, ProductMetric(PER_ACTION))
                kernel_mean = estimate_expectation(f_of(view.sample_next), w)
                assert kernel_mean == pytest.approx(f_of(view.sample_next[match]).mean(), abs=1e-6)


class TestMerge:
    def test_empty_inserts(self):
        buf = TransitionBuffer(2, 2, merge_threshold=0.02)
        merge_or_insert(((0, 0), 1), (0.1, 0), buf, h=1)
        assert buf.n_reps(1) == 1 and buf.n_samples(1) == 1 and buf.n_samples(2) == 0

    def test_snaps_within_threshold(self):
        buf = TransitionBuffer(1, 2, merge_threshold=0.02)
        buf.merge_or_insert(1, (0, 0), 0, (0.1, 0))
        rep = buf.merge_or_insert(1, (0.01, 0), 0, (0.11, 0))
        v = buf[1]
        assert rep == 0 and v.n_reps == 1 and v.n_samples == 2
        np.testing.assert_array_equal(v.rep_states[0], [0, 0])
        # next states are kept verbatim
        np.testing.assert_allclose(v.sample_next, [[0.1, 0], [0.11, 0]])

    def test_new_rep_beyond_threshold(self):
        buf = TransitionBuffer(1, 2, merge_threshold=0.02)
        buf.merge_or_insert(1, (0, 0), 0, (0.1, 0))
        buf.merge_or_insert(1, (0.03, 0), 0, (0.13, 0))
        assert buf.n_reps(1) == 2

    def test_other_action_not_merged(self):
        buf = TransitionBuffer(1, 2, merge_threshold=0.02)
        buf.merge_or_insert(1, (0, 0), 0, (0.1, 0))
        buf.merge_or_insert(1, (0, 0), 1, (0.1, 0))
        assert buf.n_reps(1) == 2

    def test_reps_separated(self):
        rng = np.random.default_rng(4)
        buf = TransitionBuffer(1, 2, merge_threshold=0.02)
        for _ in range(500):
            buf.merge_or_insert(1, rng.uniform(-0.2, 0.2, 2), int(rng.integers(0, 2)), (0, 0))
        v = buf[1]
        for a in (0, 1):
            pts = v.rep_states[v.rep_actions == a]
            d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
            assert d[~np.eye(len(pts), dtype=bool)].min() > 0.02
        assert v.multiplicity.sum() == 500 and v.multiplicity.min() >= 1

    def test_csv_round_trip(self):
        rng = np.random.default_rng(2)
        buf = TransitionBuffer(3, 2, merge_threshold=0.02)
        for _ in range(60):
            buf.merge_or_insert(int(rng.integers(1, 4)), rng.uniform(-0.1, 0.1, 2), int(rng.integers(0, 4)),
                                rng.uniform(-1, 1, 2))
        fh = io.StringIO()
        buf.write_csv(fh)
        fh.seek(0)
        assert fh.readline().strip() == "h,q0,q1,action,n0,n1"
        fh.seek(0)
        back = TransitionBuffer.read_csv(fh, horizon=3, merge_threshold=0.02)
        for h in (1, 2, 3):
            a, b = buf[h], back[h]
            np.testing.assert_array_equal(a.rep_states, b.rep_states)
            np.testing.assert_array_equal(a.rep_actions, b.rep_actions)
            np.testing.assert_array_equal(a.sample_rep, b.sample_rep)
            np.testing.assert_array_equal(a.sample_next, b.sample_next)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            SmootherParams(0.0, 0.5)
        with pytest.raises(ValueError):
            SmootherParams(0.1, 0.0)
        with pytest.raises(ValueError):
            SmootherParams(0.1, 1.5)
