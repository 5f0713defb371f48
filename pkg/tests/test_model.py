import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgeinfer.bundle_io import load_bundle, save_bundle
from edgeinfer.model import (
    TABLE_SPANS,
    AttentionSpans,
    EncoderConfig,
    LayerOps,
    OpTrace,
    SfuCosts,
    account_cycles,
    attention_head,
    encoder_block,
    encoder_forward,
    flops_count,
    gelu,
    layer_norm,
    masked_softmax,
    random_bundle,
    random_sentences,
    span_mask,
)
from edgeinfer.numerics import matmul_tiled, quantize_fit, tile_cycles
from edgeinfer.sparse import decode_bitmask

TOY = EncoderConfig.toy()


@pytest.fixture(scope="module")
def bundle():
    return random_bundle(TOY, seed=11, spans=(5, 16))


def naive_masked_softmax(a, mask):
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True) * mask


# ------------------------------------------------------------------ softmax


def test_softmax_equal_row_and_null_mask():
    out = masked_softmax(np.full((3, 7), 2.5), np.ones((3, 7)), tile_n=4)
    np.testing.assert_allclose(out, 1 / 7, rtol=0, atol=1e-15)
    assert np.all(masked_softmax(np.ones((2, 5)), np.zeros((2, 5))) == 0)


def test_softmax_dominated_max():
    a = np.zeros((1, 6))
    a[0, 2] = 1000.0
    out = masked_softmax(a, np.ones((1, 6)), 4)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[0], np.eye(6)[2], atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 8, 16]))
def test_softmax_matches_naive_oracle(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 3, size=(8, 8))
    mask = rng.random((8, 8))
    mask[rng.random((8, 8)) < 0.3] = 0.0
    np.testing.assert_allclose(masked_softmax(a, mask, n), naive_masked_softmax(a, mask), rtol=0, atol=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_softmax_row_sums(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 5, size=(6, 11))
    full = masked_softmax(a, np.ones_like(a), 4)
    np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-9)
    partial = masked_softmax(a, (rng.random(a.shape) < 0.5).astype(float), 4)
    assert np.all(partial.sum(axis=1) <= 1 + 1e-12)


# --------------------------------------------------------------- layer norm


def test_layer_norm_trivial_cases():
    np.testing.assert_array_equal(layer_norm(np.full(5, 3.0), np.ones(5), np.zeros(5)), np.zeros(5))
    np.testing.assert_allclose(layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-15), [1, -1], atol=1e-7)


@given(st.integers(0, 2**32 - 1), st.integers(2, 64))
def test_layer_norm_against_two_pass_oracle(seed, h):
    rng = np.random.default_rng(seed)
    x = rng.normal(3, 2, size=(4, h))
    g, b = rng.normal(size=h), rng.normal(size=h)
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    expected = (x - mean) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(layer_norm(x, g, b, 1e-5), expected, atol=1e-6)
    z = layer_norm(x, np.ones(h), np.zeros(h), 1e-12)
    np.testing.assert_allclose(z.mean(axis=1), 0, atol=1e-6)
    np.testing.assert_allclose(z.var(axis=1), 1, atol=1e-6)


# --------------------------------------------------------------------- spans


def test_span_mask_window():
    assert not span_mask(0, 8).any()
    assert span_mask(8, 8).all()
    m = span_mask(2, 8)
    for i in range(8):
        for j in range(8):
            assert m[i, j] == (abs(i - j) <= 2)
    soft = span_mask(2, 8, ramp=2.0)
    assert soft[0, 2] == 1.0 and soft[0, 3] == 0.5 and soft[0, 4] == 0.0


def test_spans_validation():
    with pytest.raises(ValueError):
        AttentionSpans((-1, 3))
    with pytest.raises(ValueError):
        AttentionSpans((1, 2, 3)).validate(TOY)
    with pytest.raises(ValueError):
        AttentionSpans((17, 3)).validate(TOY)


# ------------------------------------------------------------------ attention


def head_oracle(hidden, hw, mask, n):
    """Explicit-mask composition of the head from datapath primitives."""
    q, _, _ = matmul_tiled(hidden, hw.wq, n)
    k, _, _ = matmul_tiled(hidden, hw.wk, n)
    v, _, _ = matmul_tiled(hidden, hw.wv, n)
    s, _, _ = matmul_tiled(q, k.T, n)
    probs = masked_softmax(s.values() / math.sqrt(hw.wq.shape[1]), mask, n)
    ctx, _, _ = matmul_tiled(quantize_fit(probs), v, n)
    return ctx


def test_span_zero_head_is_skipped(bundle):
    h = quantize_fit(np.random.default_rng(0).normal(size=(16, 32)))
    ctx, ops = attention_head(h, bundle.head_weights(0), 0, 16)
    assert np.all(ctx.values() == 0) and ctx.shape == (16, 16)
    assert ops.macs == 0 and ops.vmacs == 0 and ops.heads_skipped == 1


def test_full_span_equals_unmasked_head(bundle):
    h = quantize_fit(np.random.default_rng(1).normal(size=(16, 32)))
    ctx, _ = attention_head(h, bundle.head_weights(1), 16, 16)
    np.testing.assert_array_equal(ctx.codes, head_oracle(h, bundle.head_weights(1), np.ones((16, 16)), 16).codes)


@pytest.mark.parametrize("n", [4, 16])
def test_span_five_matches_explicit_mask_oracle(bundle, n):
    h = quantize_fit(np.random.default_rng(2).normal(size=(16, 32)))
    mask = np.array([[1.0 if abs(i - j) <= 5 else 0.0 for j in range(16)] for i in range(16)])
    ctx, _ = attention_head(h, bundle.head_weights(0), 5, n)
    np.testing.assert_array_equal(ctx.codes, head_oracle(h, bundle.head_weights(0), mask, n).codes)


def test_span_above_seq_len_rejected(bundle):
    h = quantize_fit(np.ones((16, 32)))
    with pytest.raises(ValueError):
        attention_head(h, bundle.head_weights(0), 17)


# -------------------------------------------------------------------- forward


def block_oracle(h, b, n, head_contexts=None):
    cfg = b.config
    heads = head_contexts or [
        head_oracle(h, b.head_weights(i), np.array([[float(abs(r - c) <= s) if s else 0.0 for c in range(cfg.seq_len)] for r in range(cfg.seq_len)]), n)
        for i, s in enumerate(b.spans)
    ]
    concat = quantize_fit(np.concatenate([c.values() for c in heads], axis=1))
    attn, _, _ = matmul_tiled(concat, b.wo, n)
    x = quantize_fit(layer_norm(h.values() + attn.values(), *b.ln_attn))
    f1, _, _ = matmul_tiled(x, b.w1, n)
    f2, _, _ = matmul_tiled(quantize_fit(gelu(f1.values())), b.w2, n)
    return quantize_fit(layer_norm(x.values() + f2.values(), *b.ln_ffn))


def test_single_layer_matches_hand_composed_block(bundle):
    tokens = [5, 17, 3, 99, 42]
    padded = tokens + [0] * (16 - len(tokens))
    emb = decode_bitmask(bundle.embedding)[np.array(padded)]
    h0, _, _ = matmul_tiled(emb, bundle.embed_proj, 16)
    expected = block_oracle(h0, bundle, 16)
    got = encoder_forward(tokens, bundle, upto_layer=1)
    np.testing.assert_array_equal(got.hidden[0].codes, expected.codes)
    assert len(got.logits) == 1 and got.logits[0].shape == (TOY.num_classes,)


def test_disabled_head_equals_zeroed_context(bundle):
    h = quantize_fit(np.random.default_rng(4).normal(size=(16, 32)))
    b = bundle.with_spans((0, 16))
    got, _ = encoder_block(h, b)
    zero = quantize_fit(np.zeros((16, 16)))
    full = head_oracle(h, b.head_weights(1), np.ones((16, 16)), 16)
    np.testing.assert_array_equal(got.codes, block_oracle(h, b, 16, [zero, full]).codes)


def test_forward_prefix_property(bundle):
    tokens = [7, 8, 9, 10, 11, 12]
    a = encoder_forward(tokens, bundle, 2)
    b = encoder_forward(tokens, bundle, 3)
    for x, y in zip(a.hidden, b.hidden):
        np.testing.assert_array_equal(x.codes, y.codes)
    np.testing.assert_array_equal(a.logits[1], b.logits[1])


def test_forward_validates_inputs(bundle):
    with pytest.raises(ValueError):
        encoder_forward([100], bundle)
    with pytest.raises(ValueError):
        encoder_forward([1] * 17, bundle)
    with pytest.raises(ValueError):
        encoder_forward([1], bundle, upto_layer=0)
    with pytest.raises(ValueError):
        encoder_forward([1], bundle, upto_layer=5)


def test_sparse_and_dense_paths_agree(bundle):
    for tokens in random_sentences(TOY, 5, seed=3):
        s = encoder_forward(tokens, bundle, sparse=True)
        d = encoder_forward(tokens, bundle, sparse=False)
        for x, y in zip(s.hidden, d.hidden):
            np.testing.assert_array_equal(x.codes, y.codes)
        assert account_cycles(s.trace) == account_cycles(d.trace)


def closed_form_macs(cfg, active_heads):
    T, H, F, E, d, K = cfg.seq_len, cfg.hidden_dim, cfg.ffn_dim, cfg.embed_dim, cfg.head_dim, cfg.num_classes
    per_head = 3 * T * H * d + 2 * T * T * d
    block = active_heads * per_head + T * H * H + 2 * T * H * F
    offramp = H * H + H * K
    return T * E * H + cfg.num_layers * (block + offramp)


def test_dense_trace_macs_match_closed_form():
    cfg = EncoderConfig.toy(num_layers=12)
    b = random_bundle(cfg, seed=1)
    tr = encoder_forward([4, 5, 6], b).trace
    assert tr.total().macs == closed_form_macs(cfg, cfg.num_heads)
    assert len(tr.layers) == 12 and tr.heads_skipped == 0


def test_all_heads_disabled_still_runs_ffn():
    cfg = EncoderConfig.toy()
    b = random_bundle(cfg, seed=1, spans=(0, 0))
    out = encoder_forward([4, 5, 6], b)
    assert out.trace.heads_skipped == cfg.num_heads * cfg.num_layers
    assert out.trace.total().macs == closed_form_macs(cfg, 0)
    assert out.trace.total().softmax_rows == 0
    assert np.any(out.hidden[-1].values() != 0)


def test_trace_counts_are_value_independent(bundle):
    a = encoder_forward([1, 2, 3], bundle).trace
    b = encoder_forward(list(range(1, 17)), bundle).trace
    assert account_cycles(a) == account_cycles(b)
    ta, tb = a.total(), b.total()
    assert (ta.macs, ta.vmacs, ta.softmax_rows, ta.layernorm_rows) == (tb.macs, tb.vmacs, tb.softmax_rows, tb.layernorm_rows)
    for ops in a.layers:
        assert 0 <= ops.vmacs_skipped <= ops.vmacs


# ----------------------------------------------------------------- cycles


def test_account_cycles_zero_and_closed_form(bundle):
    assert account_cycles(OpTrace(16, 16, 32)) == 0
    cfg = TOY
    tr = encoder_forward([1, 2], random_bundle(cfg, seed=2)).trace
    T, H, F, E, d, K, n = cfg.seq_len, cfg.hidden_dim, cfg.ffn_dim, cfg.embed_dim, cfg.head_dim, cfg.num_classes, 16
    sfu = SfuCosts()
    head = 3 * tile_cycles(T, H, d, n) + tile_cycles(T, d, T, n) + tile_cycles(T, T, d, n)
    block = cfg.num_heads * head + tile_cycles(T, H, H, n) + tile_cycles(T, H, F, n) + tile_cycles(T, F, H, n)
    ramp = tile_cycles(1, H, H, n) + tile_cycles(1, H, K, n)
    pu = tile_cycles(T, E, H, n) + cfg.num_layers * (block + ramp)
    softmax = cfg.num_layers * cfg.num_heads * T * sfu.softmax_passes * math.ceil(T / n)
    norm = cfg.num_layers * 2 * T * sfu.layernorm_passes * math.ceil(H / n)
    elementwise = cfg.num_layers * (cfg.num_heads * T * T + 2 * T * H + T * F + H)
    entropy = cfg.num_layers * sfu.entropy_cycles
    assert account_cycles(tr) == pu + softmax + norm + math.ceil(elementwise / n) + entropy


def test_account_cycles_recomputes_for_other_tile_sizes():
    cfg = EncoderConfig.toy(hidden_dim=64, ffn_dim=128, seq_len=64, num_layers=1)
    tr = encoder_forward([1, 2], random_bundle(cfg, seed=0), tile_n=16).trace
    sfu_free = SfuCosts(0, 0, 0, 0)
    small = account_cycles(tr, 8, sfu_free)
    big = account_cycles(tr, 16, sfu_free)
    assert 3.0 < small / big <= 4.0


# -------------------------------------------------------------------- FLOPs


def test_flops_full_spans_ratio_one():
    cfg = EncoderConfig.albert_base()
    assert flops_count(AttentionSpans.full(cfg), cfg)["ratio"] == 1.0


@pytest.mark.parametrize("task,target", [("MNLI", 1.22), ("QQP", 1.22), ("SST-2", 1.18), ("QNLI", 1.18)])
def test_flops_table_spans(task, target):
    r = flops_count(TABLE_SPANS[task], EncoderConfig.albert_base())
    assert abs(r["ratio"] - target) <= 0.03


def test_dense_layer_flops_near_quoted_figure():
    cfg = EncoderConfig.albert_base(num_layers=1)
    assert abs(flops_count(AttentionSpans.full(cfg), cfg)["dense_flops"] / 1.9e9 - 1) < 0.05


def test_flops_all_zero_spans_is_max_ratio():
    cfg = EncoderConfig.albert_base()
    zero = flops_count(AttentionSpans((0,) * 12), cfg)["ratio"]
    one = flops_count(AttentionSpans((1,) + (0,) * 11), cfg)["ratio"]
    assert zero > one > 1.0


# ---------------------------------------------------------------- bundle IO


def test_bundle_round_trip(tmp_path, bundle):
    save_bundle(bundle, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert back.config == bundle.config and tuple(back.spans) == tuple(bundle.spans)
    for name in ("wq", "wk", "wv", "wo", "w1", "w2", "embed_proj"):
        np.testing.assert_array_equal(getattr(back, name).codes, getattr(bundle, name).codes)
        assert getattr(back, name).format == getattr(bundle, name).format
    np.testing.assert_array_equal(back.embedding.payload, bundle.embedding.payload)
    a = encoder_forward([3, 4], bundle)
    b = encoder_forward([3, 4], back)
    np.testing.assert_array_equal(a.hidden[-1].codes, b.hidden[-1].codes)


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig.toy(hidden_dim=33)
    with pytest.raises(ValueError):
        EncoderConfig.toy(seq_len=0)
