import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgeinfer.envm import (
    MLC2,
    MLC3,
    SLC,
    CellConfig,
    EnvmImage,
    MemoryCosts,
    decode_levels,
    envm_geometry,
    inject_faults,
    misread_probability,
    pack_embeddings,
    power_on_cost,
    readout,
    run_trials,
    sample_analog,
    sigma_for_misread,
)
from edgeinfer.model import EncoderConfig, random_bundle
from edgeinfer.numerics import FloatFormat, QuantTensor, quantize_fit
from edgeinfer.sparse import decode_bitmask, encode_bitmask, magnitude_prune

Q = lambda z: NormalDist().cdf(-z)


@pytest.fixture(scope="module")
def tensor():
    x = magnitude_prune(np.random.default_rng(0).normal(size=(200, 16)), 0.4)
    return encode_bitmask(quantize_fit(x))


def same(a, b):
    return a.shape == b.shape and np.array_equal(a.mask, b.mask) and np.array_equal(a.payload, b.payload) and a.format == b.format


def test_presets_and_calibration():
    assert (SLC.area_density, MLC2.area_density, MLC3.area_density) == (0.28, 0.08, 0.04)
    assert (SLC.read_latency, MLC2.read_latency, MLC3.read_latency) == (1.21, 1.54, 2.96)
    for cfg, p in ((SLC, 1e-12), (MLC2, 1e-9), (MLC3, 1e-4)):
        assert misread_probability(cfg.level_sigma, cfg.bits_per_cell) == pytest.approx(p, rel=1e-6)
    with pytest.raises(ValueError):
        CellConfig("x", 4, 0.1, 1, 1)
    with pytest.raises(ValueError):
        CellConfig("x", 2, -0.1, 1, 1)


@pytest.mark.parametrize("cfg", [SLC, MLC2, MLC3])
def test_fault_free_identity(tensor, cfg):
    img = pack_embeddings(tensor, cfg.with_sigma(0), SLC.with_sigma(0))
    assert img.num_cells == tensor.size + cfg.cells_per_byte * tensor.nnz
    out = readout(inject_faults(img, 7))
    assert not out.corrupted and same(out.tensor, tensor)


def test_cells_per_byte_and_padding(tensor):
    assert pack_embeddings(tensor, MLC2).data_cells.size == 4 * tensor.nnz
    img = pack_embeddings(tensor, MLC3)
    cells = img.data_cells.reshape(-1, 3)
    assert cells.shape[0] == tensor.nnz
    assert cells[:, 2].max() <= 3  # last cell holds the top two bits, padding bit 0
    np.testing.assert_array_equal(cells[:, 0] | (cells[:, 1] << 3) | (cells[:, 2].astype(int) << 6), tensor.payload)
    with pytest.raises(ValueError):
        pack_embeddings(tensor, MLC2, MLC2)


def test_injection_is_deterministic(tensor):
    img = pack_embeddings(tensor, MLC3.with_sigma(0.3))
    a, b = inject_faults(img, 5), inject_faults(img, 5)
    np.testing.assert_array_equal(a.data_cells, b.data_cells)
    assert not np.array_equal(a.data_cells, inject_faults(img, 6).data_cells)


def _uniform_image(bits, n, sigma, seed=0):
    levels = np.random.default_rng(seed).integers(0, 1 << bits, n).astype(np.uint8)
    cfg = CellConfig("u", bits, sigma, 1, 1)
    return EnvmImage(np.zeros(0, np.uint8), levels, SLC.with_sigma(0), cfg, (0,), FloatFormat(4))


@pytest.mark.parametrize("bits,sigma", [(1, 10.0), (2, 10.0), (3, 10.0), (2, 0.3), (3, 0.25)])
def test_flip_rate_matches_gaussian_misread(bits, sigma):
    n = 200_000
    img = _uniform_image(bits, n, sigma)
    flips = inject_faults(img, 1).data_cells != img.data_cells
    top = (1 << bits) - 1
    edge = (img.data_cells == 0) | (img.data_cells == top)
    per_cell = np.where(edge, Q(0.5 / sigma), 2 * Q(0.5 / sigma))
    expected = per_cell.mean()
    sd = math.sqrt((per_cell * (1 - per_cell)).sum()) / n
    assert abs(flips.mean() - expected) <= 3 * sd
    # uniform-level closed form
    assert abs(flips.mean() - misread_probability(sigma, bits)) <= 3 * sd + 3 * math.sqrt(expected / n)


def test_readout_flags_popcount_mismatch(tensor):
    img = pack_embeddings(tensor, MLC2)
    mask = img.mask_cells.copy()
    mask[np.flatnonzero(mask == 0)[0]] = 1
    broken = EnvmImage(mask, img.data_cells, img.mask_cfg, img.data_cfg, img.shape, img.format)
    out = readout(broken)
    assert out.corrupted and out.tensor.well_formed
    assert out.tensor.nnz == tensor.nnz + 1


def test_faults_only_where_analog_crossed_a_midpoint(tensor):
    img = pack_embeddings(tensor, MLC3.with_sigma(0.35), SLC.with_sigma(0))
    analog = sample_analog(img, 3)
    crossed = np.abs(analog.data - img.data_cells) >= 0.5
    faulty = inject_faults(img, 3)
    changed = faulty.data_cells != img.data_cells
    assert changed.any()
    # a crossing at an edge level in the outward direction clips back
    assert not np.any(changed & ~crossed)
    np.testing.assert_array_equal(faulty.data_cells, decode_levels(analog.data, 8))
    bad_bytes = set(np.flatnonzero(changed) // 3)
    out = readout(faulty).tensor
    diff = set(np.flatnonzero(out.payload != tensor.payload))
    assert diff <= bad_bytes


@given(st.integers(0, 10_000), st.floats(0.5, 20))
def test_unprotected_data_never_corrupts_the_mask(seed, sigma):
    x = QuantTensor(np.random.default_rng(seed).integers(0, 256, 64).astype(np.uint8), FloatFormat(4))
    s = encode_bitmask(x)
    img = pack_embeddings(s, MLC3.with_sigma(sigma), SLC.with_sigma(0))
    out = readout(inject_faults(img, seed))
    assert not out.corrupted
    np.testing.assert_array_equal(out.tensor.mask, s.mask)


def test_flip_count_monotone_in_sigma(tensor):
    sigmas = [0.1, 0.2, 0.3, 0.5, 1.0]
    for seed in range(10):
        counts = []
        for s in sigmas:
            img = pack_embeddings(tensor, MLC3.with_sigma(s), SLC.with_sigma(s))
            f = inject_faults(img, seed)
            counts.append(int((f.data_cells != img.data_cells).sum() + (f.mask_cells != img.mask_cells).sum()))
        assert counts == sorted(counts)


def _fidelity(source):
    ref = decode_bitmask(source).codes

    def evaluate(t):
        return float(np.mean(decode_bitmask(t).codes == ref))

    return evaluate


def test_trials_with_zero_sigma(tensor):
    st_ = run_trials(tensor, MLC3.with_sigma(0), SLC.with_sigma(0), _fidelity(tensor), trials=10, seed=0)
    assert st_.mean_accuracy == st_.min_accuracy == st_.fault_free_accuracy == 1.0
    assert st_.cell_flips == (0,) * 10


def test_trials_default_presets_on_toy_embedding():
    emb = random_bundle(EncoderConfig.toy(), seed=0).embedding
    mlc2 = run_trials(emb, MLC2, SLC, _fidelity(emb), trials=100, seed=0)
    assert sum(w == 0 for w in mlc2.weight_flips) >= 99
    mlc3 = run_trials(emb, MLC3.with_sigma(0.2), SLC, _fidelity(emb), trials=100, seed=0)
    assert sum(f > 0 for f in mlc3.cell_flips) > 50
    assert mlc3.min_accuracy <= mlc3.mean_accuracy


def test_trials_rejects_zero_trials(tensor):
    with pytest.raises(ValueError):
        run_trials(tensor, MLC2, SLC, lambda t: 1.0, trials=0)


def test_trial_seeds_are_base_plus_index(tensor):
    cfg = MLC3.with_sigma(0.3)
    st_ = run_trials(tensor, cfg, SLC, _fidelity(tensor), trials=3, seed=10)
    img = pack_embeddings(tensor, cfg, SLC)
    for i in range(3):
        f = inject_faults(img, 10 + i)
        assert st_.cell_flips[i] == int((f.data_cells != img.data_cells).sum() + (f.mask_cells != img.mask_cells).sum())


def test_geometry_examples():
    assert envm_geometry(MLC2, 2) == {"area_mm2": 0.16, "read_latency_ns": 1.54}
    assert envm_geometry(SLC, 1) == {"area_mm2": 0.28, "read_latency_ns": 1.21}
    assert envm_geometry(MLC3, 1) == {"area_mm2": 0.04, "read_latency_ns": 2.96}
    with pytest.raises(ValueError):
        envm_geometry(SLC, -1)


def test_power_on_zero_size():
    empty = encode_bitmask(QuantTensor(np.zeros(0, np.uint8), FloatFormat(4)))
    r = power_on_cost(empty)
    assert r["envm"] == {"latency": 0.0, "energy": 0.0}
    assert r["conventional"] == {"latency": 0.0, "energy": 0.0}


def test_power_on_costs_scale_with_power_cycles(tensor):
    one = power_on_cost(tensor, power_cycles=1)
    ten = power_on_cost(tensor, power_cycles=10)
    assert ten["ratios"] == pytest.approx(one["ratios"])
    assert ten["savings"]["energy"] == pytest.approx(10 * one["savings"]["energy"])
    assert ten["savings"]["latency"] == pytest.approx(10 * one["savings"]["latency"])


def test_config_round_trip():
    assert CellConfig.from_dict(MLC2.to_dict()) == MLC2
    assert MemoryCosts.from_dict(MemoryCosts().to_dict()) == MemoryCosts()
    assert sigma_for_misread(misread_probability(0.2, 2), 2) == pytest.approx(0.2)
