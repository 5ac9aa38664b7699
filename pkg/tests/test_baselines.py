import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsparse.baselines import (
    SignSGDServerState,
    TopKConfig,
    mv_signsgd_aggregate,
    mv_signsgd_client,
    sign_with_zero_positive,
    signs_to_mask,
    topk_client_train,
    topk_mask,
    topk_uplink_from_theta,
    weight_gradient,
)
from fedsparse.data import Dataset, generate_synthetic
from fedsparse.nn import Dense, NetworkTopology, ReLU, build_network, cross_entropy, forward_masked
from fedsparse.protocol import ClientState, RoundConfig

TOPO = NetworkTopology((6,), (Dense(6, 5), ReLU(), Dense(5, 3)))


class TestTopKMask:
    def test_all_ones(self):
        assert topk_mask([0.3, -2.0, 9.0], TopKConfig(1.0)).ones() == 3

    def test_hand_sort(self):
        assert list(topk_mask([3, 1, 2, 0], TopKConfig(0.5)).bits()) == [1, 0, 1, 0]

    def test_tie_lowest_index(self):
        assert list(topk_mask([5, 5, 5], TopKConfig(1 / 3)).bits()) == [1, 0, 0]

    def test_config_bounds(self):
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                TopKConfig(bad)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 2000), st.floats(1e-3, 1.0), st.integers(0, 2**32 - 1))
    def test_density_exact(self, n, k, seed):
        s = np.random.default_rng(seed).normal(size=n)
        assert topk_mask(s, TopKConfig(k)).ones() == min(n, math.ceil(k * n - 1e-9))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 500), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
    def test_increasing_transform_invariant(self, n, k, seed):
        s = np.random.default_rng(seed).normal(size=n)
        cfg = TopKConfig(k)
        a = topk_mask(s, cfg)
        assert topk_mask(np.exp(s), cfg) == a
        assert topk_mask(3 * s + 7, cfg) == a
        assert topk_mask(np.arctan(s), cfg) == a

    def test_matches_brute_force(self):
        # enumerate the k largest by repeated max with an explicit lowest-index tie break
        rng = np.random.default_rng(3)
        for _ in range(50):
            s = rng.integers(0, 4, 12).astype(float)
            k = int(rng.integers(1, 13))
            chosen, left = [], list(range(12))
            for _ in range(k):
                best = max(left, key=lambda i: (s[i], -i))
                chosen.append(best)
                left.remove(best)
            expect = np.zeros(12, np.uint8)
            expect[chosen] = 1
            np.testing.assert_array_equal(topk_mask(s, TopKConfig(k / 12)).bits(), expect)


class TestTopKTrain:
    def _client(self):
        ds = generate_synthetic(3, 6, 20, seed=2)
        return ClientState(0, ds)

    def test_full_k_uplinks_all_ones(self):
        w = build_network(0, TOPO)
        msg = topk_client_train(self._client(), np.full(w.n, 0.5), w, RoundConfig(eta=5.0), np.random.default_rng(0),
                                TopKConfig(1.0))
        assert msg.mask.ones() == w.n

    def test_fixed_scores(self):
        # eta must stay positive, so freeze the scores with a zero loss gradient and lambda = 0
        w = build_network(0, TOPO)
        theta = np.random.default_rng(1).random(w.n)
        topk = TopKConfig(0.3)
        msg = topk_client_train(self._client(), theta, w, RoundConfig(eta=1.0), np.random.default_rng(0), topk,
                                data_grad=lambda weights, m, x, y: np.zeros(weights.n))
        assert msg.mask == topk_uplink_from_theta(theta, topk)

    def test_density_every_round(self):
        w = build_network(0, TOPO)
        topk = TopKConfig(0.37)
        theta = np.full(w.n, 0.5)
        for r in range(3):
            msg = topk_client_train(self._client(), theta, w, RoundConfig(eta=20.0), np.random.default_rng(r), topk)
            assert msg.mask.ones() == topk.count(w.n)
            theta = msg.mask.bits().astype(float)


class TestSigns:
    def test_zero_is_positive(self):
        assert list(sign_with_zero_positive([0.0, -0.0, 1e-300, -1e-300])) == [1, 1, 1, -1]

    def test_hand(self):
        assert list(sign_with_zero_positive([-2, 3])) == [-1, 1]

    def test_mask_mapping(self):
        assert list(signs_to_mask([-1, 1, 1, -1]).bits()) == [0, 1, 1, 0]


class TestWeightGradient:
    def test_matches_direct_network(self):
        net = build_network(4, TOPO)
        rng = np.random.default_rng(0)
        w = net.flat() * rng.uniform(0.5, 1.5, net.n)
        x, y = rng.random((5, 6)), rng.integers(0, 3, 5)

        def loss(wv):
            return cross_entropy(forward_masked(net, wv / net.flat(), x)[0], y)[0]

        g = weight_gradient(net, w, x, y, batch_size=2)
        h = 1e-6
        for j in rng.choice(net.n, 10, replace=False):
            up, dn = w.copy(), w.copy()
            up[j] += h
            dn[j] -= h
            assert g[j] == pytest.approx((loss(up) - loss(dn)) / (2 * h), rel=1e-4, abs=1e-7)

    def test_client_sign_of_gradient(self):
        net = build_network(4, TOPO)
        ds = generate_synthetic(3, 6, 10, seed=1)
        w = net.flat().copy()
        got = mv_signsgd_client(w, ClientState(0, ds), net, RoundConfig(batch_size=7))
        ref = sign_with_zero_positive(weight_gradient(net, w, ds.features, ds.labels, 7))
        np.testing.assert_array_equal(got, ref)
        assert set(np.unique(got)) <= {-1, 1}

    def test_empty_client(self):
        net = build_network(0, TOPO)
        empty = ClientState(0, Dataset(np.zeros((0, 6)), np.zeros(0, dtype=int), 3))
        with pytest.raises(ValueError, match="empty"):
            mv_signsgd_client(net.flat(), empty, net, RoundConfig())


class TestMajorityVote:
    def test_hand_example(self):
        state = SignSGDServerState(np.array([1.0, 1.0]), 0.5)
        signs = [np.array([1, -1]), np.array([-1, -1]), np.array([1, -1])]
        nxt = mv_signsgd_aggregate(signs, state)
        np.testing.assert_array_equal(nxt.weights, [0.5, 1.5])
        assert nxt.round == 1

    def test_single_client(self):
        state = SignSGDServerState(np.zeros(3), 0.25)
        nxt = mv_signsgd_aggregate([np.array([1, -1, 1])], state)
        np.testing.assert_array_equal(nxt.weights, [-0.25, 0.25, -0.25])

    def test_tie_votes_positive(self):
        state = SignSGDServerState(np.zeros(1), 1.0)
        nxt = mv_signsgd_aggregate([np.array([1]), np.array([-1])], state)
        assert nxt.weights[0] == -1.0

    def test_errors(self):
        state = SignSGDServerState(np.zeros(2), 1.0)
        with pytest.raises(ValueError):
            mv_signsgd_aggregate([], state)
        with pytest.raises(ValueError):
            mv_signsgd_aggregate([np.array([1, 1, 1])], state)
        with pytest.raises(ValueError):
            SignSGDServerState(np.array([np.inf]), 1.0)
        with pytest.raises(ValueError):
            SignSGDServerState(np.zeros(1), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 300), st.integers(-20, 0), st.integers(0, 2**32 - 1))
    def test_step_magnitude_exact(self, k, n, log_eta, seed):
        # dyadic weights and step keep the subtraction exact in binary floating point
        rng = np.random.default_rng(seed)
        eta = 2.0 ** log_eta
        w = rng.integers(-2**20, 2**20, n) * 2.0**-10
        signs = [rng.choice([-1, 1], n) for _ in range(k)]
        nxt = mv_signsgd_aggregate(signs, SignSGDServerState(w, eta))
        assert np.all(np.abs(nxt.weights - w) == eta)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 300), st.floats(1e-6, 10.0), st.integers(0, 2**32 - 1))
    def test_step_magnitude_arbitrary_floats(self, n, eta, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=n)
        nxt = mv_signsgd_aggregate([rng.choice([-1, 1], n)], SignSGDServerState(w, eta))
        # exact up to the rounding of one subtraction
        ulp = np.spacing(np.maximum(np.abs(w), np.abs(nxt.weights)))
        assert np.all(np.abs(np.abs(nxt.weights - w) - eta) <= ulp)
