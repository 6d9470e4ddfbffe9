import numpy as np
import pytest
from hypothesis import given, strategies as st

from gemmflow.dsp_pack import (PackedPair, estimate_array_dsps, exhaustive_mismatches, pack, packed_mac,
                               packed_products, split, unpack)

i8 = st.integers(-128, 127)


@pytest.mark.parametrize("w1,w2,p", [(3, -5, 786427), (0, 0, 0), (-128, -128, -33554560)])
def test_pack_values(w1, w2, p):
    assert pack(w1, w2).p == p == w1 * 2 ** 18 + w2


def test_packed_mac_intermediates():
    raw = pack(3, -5).p * 7
    assert raw == 5504989
    assert raw >> 18 == 20 and raw & (2 ** 18 - 1) == 262109 >= 131072
    assert packed_mac(pack(3, -5), 7) == (21, -35)


@given(i8, i8)
def test_zero_multiplier(w1, w2):
    assert packed_mac(pack(w1, w2), 0) == (0, 0)


def test_extreme_products():
    assert packed_mac(pack(-128, 127), -128) == (16384, -16256)


def test_unpack_round_trip_all_pairs():
    w = np.arange(-128, 128)
    w1, w2 = np.meshgrid(w, w, indexing="ij")
    h, l = split(w1.astype(np.int64) * 2 ** 18 + w2)
    assert np.array_equal(h, w1) and np.array_equal(l, w2)
    assert unpack(pack(-7, 100)) == (-7, 100)


@given(i8, i8, i8)
def test_packed_mac_matches_products(w1, w2, a):
    assert packed_mac(pack(w1, w2), a) == (w1 * a, w2 * a)


def test_vectorised_matches_scalar():
    rng = np.random.default_rng(0)
    w1, w2, a = (rng.integers(-128, 128, 500) for _ in range(3))
    p1, p2 = packed_products(w1, w2, a)
    assert np.array_equal(p1, w1 * a) and np.array_equal(p2, w2 * a)


def test_exhaustive_on_a_slice():
    assert exhaustive_mismatches(range(-128, -120)) == 0


def test_rejects_out_of_range():
    with pytest.raises(ValueError):
        pack(128, 0)
    with pytest.raises(ValueError):
        packed_mac(pack(1, 1), -129)
    with pytest.raises(ValueError):
        PackedPair(1 << 26)


@pytest.mark.parametrize("dim,packed,n", [(16, False, 256), (32, True, 512), (2, True, 2), (32, False, 1024)])
def test_dsp_estimate(dim, packed, n):
    assert estimate_array_dsps(dim, packed) == n


def test_dsp_estimate_odd_dim_packed():
    with pytest.raises(ValueError):
        estimate_array_dsps(3, True)
