import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgeinfer.numerics import FloatFormat, QuantTensor, quantize, quantize_fit
from edgeinfer.sparse import (
    BitmaskTensor,
    CorruptTensor,
    decode_bitmask,
    encode_bitmask,
    from_bytes,
    magnitude_prune,
    sparsity,
    storage_footprint,
    to_bytes,
)


@st.composite
def quant_tensors(draw):
    rank = draw(st.integers(1, 3))
    shape = tuple(draw(st.lists(st.integers(1, 9), min_size=rank, max_size=rank)))
    seed = draw(st.integers(0, 2**32 - 1))
    zero_frac = draw(st.floats(0.0, 1.0))
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 256, size=shape).astype(np.uint8)
    codes[rng.random(shape) < zero_frac] = 0
    fmt = FloatFormat(draw(st.integers(2, 5)), draw(st.integers(-10, 3)))
    return QuantTensor(codes, fmt)


@given(quant_tensors())
def test_encode_decode_bijection(q):
    s = encode_bitmask(q)
    assert s.well_formed
    back = decode_bitmask(s)
    np.testing.assert_array_equal(back.codes, q.codes)
    assert back.format == q.format
    again = encode_bitmask(back)
    np.testing.assert_array_equal(again.mask, s.mask)
    np.testing.assert_array_equal(again.payload, s.payload)


@given(quant_tensors())
def test_binary_layout_round_trip(q):
    s = encode_bitmask(q)
    blob = to_bytes(s)
    n = q.size
    assert len(blob) == 16 + 4 * len(q.shape) + math.ceil(n / 8) + s.nnz
    t = from_bytes(blob)
    assert t.shape == s.shape and t.format == s.format
    np.testing.assert_array_equal(t.mask, s.mask)
    np.testing.assert_array_equal(t.payload, s.payload)


def test_header_and_mask_bit_order():
    codes = np.zeros(10, np.uint8)
    codes[[0, 3, 9]] = [0x11, 0x22, 0x33]
    s = encode_bitmask(QuantTensor(codes, FloatFormat(4, -2)))
    blob = to_bytes(s)
    assert blob[:4] == b"BMSK"
    assert blob[4:6] == (1).to_bytes(2, "little")
    assert blob[6:8] == (1).to_bytes(2, "little")
    assert blob[8] == 4 and blob[9] == (-2) & 0xFF
    assert blob[10:16] == bytes(6)
    assert blob[16:20] == (10).to_bytes(4, "little")
    # element 0 -> bit 0, element 3 -> bit 3, element 9 -> byte 1 bit 1
    assert blob[20:22] == bytes([0b00001001, 0b00000010])
    assert blob[22:] == bytes([0x11, 0x22, 0x33])


def test_negative_zero_is_kept_in_payload():
    s = encode_bitmask(QuantTensor(np.array([0x00, 0x80], np.uint8), FloatFormat(4)))
    assert s.mask.tolist() == [False, True]
    assert s.payload.tolist() == [0x80]


def test_all_zero_and_dense_tensors():
    z = encode_bitmask(QuantTensor(np.zeros((3, 4), np.uint8), FloatFormat(4)))
    assert z.nnz == 0 and not z.mask.any()
    codes = np.arange(1, 13, dtype=np.uint8).reshape(3, 4)
    d = encode_bitmask(QuantTensor(codes, FloatFormat(4)))
    assert d.mask.all()
    np.testing.assert_array_equal(d.payload, codes.reshape(-1))


def test_popcount_mismatch_is_rejected():
    s = BitmaskTensor((4,), [1, 1, 0, 0], [5], FloatFormat(4))
    with pytest.raises(CorruptTensor):
        decode_bitmask(s)
    blob = to_bytes(encode_bitmask(QuantTensor(np.array([1, 2, 0], np.uint8), FloatFormat(4))))
    with pytest.raises(CorruptTensor):
        from_bytes(blob[:-1])
    with pytest.raises(CorruptTensor):
        from_bytes(b"XXXX" + blob[4:])


def test_gather_rows_matches_dense_decode():
    rng = np.random.default_rng(0)
    x = magnitude_prune(rng.normal(size=(30, 8)), 0.4)
    s = encode_bitmask(quantize_fit(x))
    rows = [0, 29, 3, 3, 17]
    np.testing.assert_array_equal(s.gather_rows(rows).codes, decode_bitmask(s).codes[rows])


def test_prune_examples():
    x = np.array([3.0, -1.0, 0.5, -2.0])
    np.testing.assert_array_equal(magnitude_prune(x, 0.5), [3.0, 0.0, 0.0, -2.0])
    np.testing.assert_array_equal(magnitude_prune(x, 1.0), x)
    with pytest.raises(ValueError):
        magnitude_prune(x, 0.0)
    with pytest.raises(ValueError):
        magnitude_prune(x, 1.5)


def test_prune_tie_break_lower_index_first():
    x = np.array([1.0, 1.0, 1.0, 1.0, 5.0])
    np.testing.assert_array_equal(magnitude_prune(x, 0.6), [0.0, 0.0, 1.0, 1.0, 5.0])


@given(st.integers(1, 500), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
def test_prune_against_sort_oracle(n, d, seed):
    x = np.random.default_rng(seed).normal(size=n)
    y = magnitude_prune(x, d)
    k = math.ceil(round((1 - d) * n, 9))
    assert np.count_nonzero(y == 0) == k
    assert abs(np.count_nonzero(y) / n - d) <= 1 / n + 1e-12
    kept, dropped = np.abs(x[y != 0]), np.abs(x[y == 0])
    if kept.size and dropped.size:
        assert kept.min() >= dropped.max()
    np.testing.assert_array_equal(y[y != 0], x[y != 0])
    np.testing.assert_array_equal(magnitude_prune(y, d), y)


def test_storage_footprint_formula():
    codes = np.zeros(1000, np.uint8)
    codes[:400] = 7
    s = encode_bitmask(QuantTensor(codes, FloatFormat(4)))
    assert storage_footprint(s) == {"payload_bytes": 400, "mask_bytes": 125, "total": 525}
    e = encode_bitmask(QuantTensor(np.zeros(0, np.uint8), FloatFormat(4)))
    assert storage_footprint(e) == {"payload_bytes": 0, "mask_bytes": 0, "total": 0}
    assert sparsity(s).density == 0.4


def test_footprint_decreases_with_density():
    x = np.random.default_rng(2).normal(size=(50, 20))
    totals = [storage_footprint(encode_bitmask(quantize_fit(magnitude_prune(x, d))))["total"] for d in (0.9, 0.6, 0.3, 0.1)]
    assert totals == sorted(totals, reverse=True) and len(set(totals)) == 4


def test_full_scale_embedding_footprint_vs_baseline():
    """30000 x 128 embeddings at 40% density against the 1.73 MB compact baseline."""
    rng = np.random.default_rng(0)
    x = magnitude_prune(rng.normal(size=(30000, 128)), 0.4)
    fp = storage_footprint(encode_bitmask(quantize_fit(x)))
    assert fp["payload_bytes"] == 1_536_000 and fp["mask_bytes"] == 480_000
    assert abs(fp["total"] / 1.73e6 - 1) <= 0.20
