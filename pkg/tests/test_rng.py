import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from superbranch.rng import RngStream, Xoshiro256, splitmix64_mix


def test_splitmix_matches_reference_output():
    # first output of SplitMix64 seeded with 0
    assert splitmix64_mix(0) == 0xE220A8397B1DCDAF


def test_xoshiro_matches_reference_sequence():
    gen = Xoshiro256([1, 2, 3, 4])
    expected = [11520, 0, 1509978240, 1215971899390074240, 1216172134540287360, 607988272756665600]
    assert [gen.next64() for _ in expected] == expected


def test_same_stream_same_sequence():
    a, b = RngStream(42, 3).generator(), RngStream(42, 3).generator()
    assert [a.next64() for _ in range(50)] == [b.next64() for _ in range(50)]


def test_distinct_streams_differ():
    a, b = RngStream(42, 0).generator(), RngStream(42, 1).generator()
    assert [a.next64() for _ in range(4)] != [b.next64() for _ in range(4)]
    c = RngStream(43, 0).generator()
    assert RngStream(42, 0).generator().next64() != c.next64()


def test_stream_rejects_bad_addresses():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(1 << 64)
    with pytest.raises(ValueError):
        RngStream(1, -1)


@given(st.integers(0, 2**64 - 1), st.integers(0, 10**6))
@settings(max_examples=50)
def test_uniform_in_unit_interval(seed, index):
    gen = RngStream(seed, index).generator()
    for _ in range(20):
        u = gen.uniform()
        assert 0.0 <= u < 1.0


def test_uniform_passes_ks():
    gen = RngStream(1).generator()
    xs = [gen.uniform() for _ in range(20000)]
    assert stats.kstest(xs, "uniform").pvalue > 1e-4


def test_exponential_mean():
    gen = RngStream(2).generator()
    xs = np.array([gen.exponential(4.0) for _ in range(20000)])
    assert abs(xs.mean() - 0.25) < 4 * 0.25 / math.sqrt(xs.size)


@pytest.mark.parametrize("lam", [0.0, 0.3, 5.0, 29.9, 75.0, 400.0])
def test_poisson_moments(lam):
    gen = RngStream(3, int(lam * 10)).generator()
    xs = np.array([gen.poisson(lam) for _ in range(4000)])
    if lam == 0:
        assert not xs.any()
        return
    sd = math.sqrt(lam / xs.size)
    assert abs(xs.mean() - lam) < 4.5 * sd
    assert abs(xs.var(ddof=1) / lam - 1) < 0.15


def test_poisson_chi_square_small_mean():
    gen = RngStream(4).generator()
    lam = 3.0
    xs = np.array([gen.poisson(lam) for _ in range(20000)])
    observed = np.bincount(xs, minlength=11)[:10]
    expected = stats.poisson.pmf(np.arange(10), lam) * xs.size
    chi2 = ((observed - expected) ** 2 / expected).sum()
    assert stats.chi2.sf(chi2, 9) > 1e-4


def test_categorical_and_below():
    gen = RngStream(5).generator()
    cdf = [0.2, 0.2, 1.0]  # middle entry has zero weight
    draws = [gen.categorical(cdf, 3) for _ in range(5000)]
    assert 1 not in draws
    assert abs(draws.count(0) / 5000 - 0.2) < 0.03
    assert all(0 <= gen.below(7) < 7 for _ in range(1000))


def test_state_round_trip():
    gen = RngStream(6).generator()
    gen.next64()
    state = gen.state
    a = [gen.next64() for _ in range(5)]
    gen.set_state(state)
    assert [gen.next64() for _ in range(5)] == a
    assert list(Xoshiro256(gen.state_array()).state) == gen.state
