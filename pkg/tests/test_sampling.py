import numpy as np
import pytest
from scipy.stats import chisquare

from mvfusion.sampling import (
    ViewProtocol,
    sample_indices,
    sample_test_indices,
    sample_train_indices,
    segment_bounds,
)


def test_center_indices_for_320_frames():
    # segment k is [10k, 10k + 10); its center is 10k + 5
    assert sample_test_indices(320, 32) == [10 * k + 5 for k in range(32)]


def test_small_cases():
    assert sample_test_indices(32, 32) == list(range(32))
    assert sample_test_indices(1, 32) == [0] * 32
    assert sample_train_indices(3, 3, np.random.default_rng(0)) == [0, 1, 2]
    assert sample_train_indices(1, 3, np.random.default_rng(0)) == [0, 0, 0]


def test_center_offset_is_half_the_segment_length_floored():
    # offset is (end - start) // 2: length 2 -> 1, length 3 -> 1, length 4 -> 2
    assert sample_test_indices(6, 3) == [1, 3, 5]
    assert sample_test_indices(9, 3) == [1, 4, 7]
    assert sample_test_indices(12, 3) == [2, 6, 10]


def test_train_indices_stay_in_their_segment():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        idx = sample_train_indices(300, 3, rng)
        for k, i in enumerate(idx):
            assert 100 * k <= i < 100 * (k + 1)


@pytest.mark.parametrize("n", [3, 32])
def test_index_contracts_over_lengths(n):
    rng = np.random.default_rng(n)
    for t in range(1, 1001):
        test = sample_test_indices(t, n)
        assert test == sample_test_indices(t, n)
        train = sample_train_indices(t, n, rng)
        for idx in (test, train):
            assert len(idx) == n
            assert all(0 <= i < t for i in idx)
            assert idx == sorted(idx)


def test_segment_bounds_partition_the_stream():
    for t in (1, 5, 31, 320, 999):
        for n in (3, 7, 32):
            b = segment_bounds(t, n)
            assert b[0][0] == 0 and b[-1][1] == t
            assert all(b[k][1] == b[k + 1][0] for k in range(n - 1))


def test_train_sampling_is_uniform_within_segments():
    rng = np.random.default_rng(2024)
    draws = np.array([sample_train_indices(30, 3, rng) for _ in range(100_000)])
    for k in range(3):
        counts = np.bincount(draws[:, k] - 10 * k, minlength=10)
        assert len(counts) == 10 and counts.min() > 0
        assert chisquare(counts).pvalue > 0.001


def test_zero_frames_rejected():
    with pytest.raises(ValueError):
        sample_test_indices(0, 3)
    with pytest.raises(ValueError):
        sample_train_indices(0, 3, np.random.default_rng(0))


def test_view_protocol_defaults():
    assert ViewProtocol.train().n_segments == 3
    assert ViewProtocol.test().n_segments == 32
    assert ViewProtocol.test().n_views == 32
    assert ViewProtocol().n_spatial_crops == 1
    with pytest.raises(ValueError):
        ViewProtocol(n_spatial_crops=3)
    with pytest.raises(ValueError):
        sample_indices(10, ViewProtocol.train())
    assert sample_indices(320, ViewProtocol.test()) == sample_test_indices(320, 32)
