import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsparse.data import Dataset
from fedsparse.mask import BinaryMask
from fedsparse.metrics import (
    CLIENT_HEADER,
    METRICS_HEADER,
    MetricsWriter,
    RoundMetrics,
    binary_entropy,
    estimate_entropy,
    evaluate,
    packed_bpp,
    round_bpp,
)
from fedsparse.nn import Dense, NetworkTopology, build_network


def brute_entropy(bits) -> float:
    """Direct -p log2 p - (1-p) log2 (1-p) over the observed fraction, no shared helpers."""
    n = len(bits)
    k = sum(bits)
    if k in (0, n):
        return 0.0
    p = k / n
    return -(p * math.log(p) + (1 - p) * math.log(1 - p)) / math.log(2)


class TestEntropy:
    @pytest.mark.parametrize("n", [1, 2, 3, 7, 8, 9, 12])
    def test_exhaustive_small(self, n):
        for bits in itertools.product((0, 1), repeat=n):
            got = estimate_entropy(BinaryMask.from_bits(np.array(bits, dtype=np.uint8)))
            assert abs(got - brute_entropy(bits)) <= 1e-12

    def test_half_density_is_one_bit(self):
        assert estimate_entropy(BinaryMask.from_bits([1, 0] * 50)) == 1.0

    def test_degenerate(self):
        assert estimate_entropy(BinaryMask.from_bits(np.ones(64, np.uint8))) == 0.0
        assert estimate_entropy(BinaryMask.from_bits(np.zeros(64, np.uint8))) == 0.0

    def test_quarter(self):
        assert estimate_entropy(BinaryMask.from_bits([1, 0, 0, 0] * 25)) == pytest.approx(0.811278, abs=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            estimate_entropy(BinaryMask.from_bits(np.zeros(0, np.uint8)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=300), st.randoms(use_true_random=False))
    def test_permutation_invariant_and_bounded(self, bits, r):
        shuffled = list(bits)
        r.shuffle(shuffled)
        a = estimate_entropy(BinaryMask.from_bits(np.array(bits, np.uint8)))
        b = estimate_entropy(BinaryMask.from_bits(np.array(shuffled, np.uint8)))
        assert a == b
        assert 0.0 <= a <= 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1))
    def test_symmetric(self, p):
        assert binary_entropy(p) == pytest.approx(binary_entropy(1 - p), abs=1e-15)


def test_round_bpp_is_unweighted_mean():
    masks = [BinaryMask.from_bits([1, 0] * 4), BinaryMask.from_bits([1] * 8)]
    per, avg = round_bpp(masks)
    assert per == [1.0, 0.0]
    assert avg == 0.5


def test_packed_bpp_counts_padding():
    assert packed_bpp(BinaryMask.from_bits([1] * 16)) == 1.0
    assert packed_bpp(BinaryMask.from_bits([1] * 9)) == pytest.approx(16 / 9)


class TestEvaluate:
    def setup_method(self):
        self.w = build_network(0, NetworkTopology((2,), (Dense(2, 2),)))
        self.w.tensors[0][:] = [[1.0, 0.0], [0.0, 1.0]]

    def test_expected_mode(self):
        ds = Dataset(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), 2)
        assert evaluate(np.ones(4), self.w, ds, "expected") == 1.0

    def test_thresholded_mode(self):
        ds = Dataset(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), 2)
        # first diagonal weight dropped (0.4 <= 1/2) so class 0 ties at 0 with class 1
        theta = np.array([0.4, 0.0, 0.0, 0.9])
        assert evaluate(theta, self.w, ds, "thresholded") == 1.0
        ds2 = Dataset(np.array([[1.0, 0.0]]), np.array([1]), 2)
        assert evaluate(theta, self.w, ds2, "thresholded") == 0.0

    def test_ties_go_to_lowest_class(self):
        ds = Dataset(np.array([[1.0, 1.0]]), np.array([0]), 2)
        assert evaluate(np.zeros(4), self.w, ds, "expected") == 1.0

    def test_sampled_needs_stream(self):
        ds = Dataset(np.zeros((1, 2)), np.array([0]), 2)
        with pytest.raises(ValueError):
            evaluate(np.ones(4), self.w, ds, "sampled")

    def test_sampled_degenerate_theta(self):
        ds = Dataset(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), 2)
        assert evaluate(np.ones(4), self.w, ds, "sampled", np.random.default_rng(0)) == 1.0

    def test_unknown_mode(self):
        ds = Dataset(np.zeros((1, 2)), np.array([0]), 2)
        with pytest.raises(ValueError, match="eval mode"):
            evaluate(np.ones(4), self.w, ds, "median")


def _metrics(r):
    return RoundMetrics(r, 0.5 + r / 100, [0.9, 1.0], 0.95, 0.45, 0.5, [0, 3], [0.4, 0.5], [1.0, 1.0])


def test_metrics_writer_schema(tmp_path):
    w = MetricsWriter(tmp_path, "fedpm", 0.0)
    for r in (1, 2):
        w.append(_metrics(r))
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == METRICS_HEADER
    assert rows[1] == ["1", "fedpm", "0.000000", "0.510000", "0.950000", "0.450000", "0.500000"]
    assert len(rows) == 3
    crow = list(csv.reader(open(tmp_path / "client_bpp.csv")))
    assert crow[0] == CLIENT_HEADER
    assert crow[2] == ["1", "3", "1.000000", "0.500000", "1.000000"]
    assert len(crow) == 5


def test_metrics_writer_append_keeps_rows(tmp_path):
    MetricsWriter(tmp_path, "fedpm", 0.0).append(_metrics(1))
    MetricsWriter(tmp_path, "fedpm", 0.0, append=True).append(_metrics(2))
    assert len(open(tmp_path / "metrics.csv").readlines()) == 3


def test_metrics_writer_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot initialise"):
        MetricsWriter(blocker / "sub", "fedpm", 0.0)


def test_all_zero_theta_predicts_class_zero():
    w = build_network(1, NetworkTopology((3,), (Dense(3, 4),)))
    labels = np.array([0, 2, 0, 1, 0, 3, 3])
    ds = Dataset(np.random.default_rng(0).random((7, 3)), labels, 4)
    assert evaluate(np.zeros(w.n), w, ds, "expected") == pytest.approx(3 / 7)


def test_sampled_equals_thresholded_on_binary_theta():
    w = build_network(2, NetworkTopology((5,), (Dense(5, 6), Dense(6, 3))))
    rng = np.random.default_rng(1)
    ds = Dataset(rng.random((40, 5)), rng.integers(0, 3, 40), 3)
    theta = rng.integers(0, 2, w.n).astype(float)
    assert evaluate(theta, w, ds, "sampled", rng) == evaluate(theta, w, ds, "thresholded")


def test_expected_mode_deterministic():
    w = build_network(2, NetworkTopology((5,), (Dense(5, 3),)))
    rng = np.random.default_rng(1)
    ds = Dataset(rng.random((40, 5)), rng.integers(0, 3, 40), 3)
    theta = rng.random(w.n)
    assert evaluate(theta, w, ds, "expected") == evaluate(theta, w, ds, "expected")


def test_identical_masks_round_bpp():
    m = BinaryMask.from_bits([1, 0, 0, 0] * 5)
    _, avg = round_bpp([m, m, m])
    assert avg == estimate_entropy(m)


def test_empty_history_writes_header_only(tmp_path):
    from fedsparse.metrics import write_metrics_csv
    from fedsparse.protocol import HistoryLog

    path = write_metrics_csv(HistoryLog("x"), tmp_path, "fedpm", 0.0)
    assert path.read_text() == ",".join(METRICS_HEADER) + "\n"
