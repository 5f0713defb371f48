"""Shared-parameter (ALBERT-style) encoder with span predication and off-ramps.

Linear layers run through the tiled 8-bit PU datapath (``matmul_tiled``);
softmax, layer norm, GELU and the off-ramp entropy are special-function-unit
work done in double precision. Every forward pass records an ``OpTrace``
whose counts depend only on shapes and spans, never on values, apart from the
zero-skip counters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .numerics import FloatFormat, QuantTensor, matmul_tiled, quantize_fit, tile_cycles
from .sparse import BitmaskTensor, decode_bitmask, encode_bitmask, magnitude_prune

PAD_TOKEN = 0


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 12
    num_heads: int = 12
    hidden_dim: int = 768
    embed_dim: int = 128
    ffn_dim: int = 3072
    seq_len: int = 128
    num_classes: int = 3
    vocab_size: int = 30000
    exponent_bits: int = 4
    layer_norm_eps: float = 1e-5
    span_ramp: float = 0.0  # 0 selects the binary span window

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.seq_len < 1 or self.num_layers < 1:
            raise ValueError("seq_len and num_layers must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @classmethod
    def toy(cls, **overrides) -> "EncoderConfig":
        base = cls(
            num_layers=4,
            num_heads=2,
            hidden_dim=32,
            embed_dim=16,
            ffn_dim=64,
            seq_len=16,
            num_classes=3,
            vocab_size=100,
        )
        return replace(base, **overrides)

    @classmethod
    def albert_base(cls, **overrides) -> "EncoderConfig":
        return replace(cls(), **overrides)


@dataclass(frozen=True)
class AttentionSpans:
    spans: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(int(s) for s in self.spans))
        if any(s < 0 for s in self.spans):
            raise ValueError("spans must be non-negative")

    def __len__(self):
        return len(self.spans)

    def __iter__(self):
        return iter(self.spans)

    def __getitem__(self, i):
        return self.spans[i]

    @classmethod
    def full(cls, cfg: EncoderConfig) -> "AttentionSpans":
        return cls((cfg.seq_len,) * cfg.num_heads)

    def validate(self, cfg: EncoderConfig) -> None:
        if len(self.spans) != cfg.num_heads:
            raise ValueError(f"expected {cfg.num_heads} spans, got {len(self.spans)}")
        if any(s > cfg.seq_len for s in self.spans):
            raise ValueError(f"span exceeds seq_len={cfg.seq_len}")


# Learned spans reported for ALBERT on four GLUE tasks.
TABLE_SPANS = {
    "MNLI": AttentionSpans((20, 0, 0, 0, 0, 0, 36, 81, 0, 0, 0, 10)),
    "QQP": AttentionSpans((16, 0, 0, 0, 0, 0, 40, 75, 0, 0, 0, 2)),
    "SST-2": AttentionSpans((31, 0, 0, 0, 0, 101, 14, 5, 0, 36, 0, 0)),
    "QNLI": AttentionSpans((39, 0, 0, 0, 0, 105, 22, 19, 0, 51, 0, 0)),
}


def span_mask(span: int, seq_len: int, ramp: float = 0.0) -> np.ndarray:
    """T x T mask over query/key distance d = |i - j|.

    Binary window: 1 where d <= span. Span 0 disables the head (null mask).
    With ``ramp > 0`` the edge softens to clip((ramp + span - d) / ramp, 0, 1).
    """
    if span == 0:
        return np.zeros((seq_len, seq_len))
    idx = np.arange(seq_len)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    if ramp > 0:
        return np.clip((ramp + span - dist) / ramp, 0.0, 1.0)
    return (dist <= span).astype(np.float64)


@dataclass(frozen=True)
class OffRamp:
    pooler: QuantTensor  # H x H
    classifier: QuantTensor  # H x K


@dataclass(frozen=True)
class EncoderBundle:
    config: EncoderConfig
    embedding: BitmaskTensor  # vocab x E
    embed_proj: QuantTensor  # E x H
    wq: QuantTensor
    wk: QuantTensor
    wv: QuantTensor
    wo: QuantTensor
    w1: QuantTensor  # H x F
    w2: QuantTensor  # F x H
    ln_attn: tuple[np.ndarray, np.ndarray]
    ln_ffn: tuple[np.ndarray, np.ndarray]
    offramps: tuple[OffRamp, ...]
    spans: AttentionSpans

    def __post_init__(self):
        cfg = self.config
        H, F, E = cfg.hidden_dim, cfg.ffn_dim, cfg.embed_dim
        expected = {
            "embed_proj": (E, H),
            "wq": (H, H),
            "wk": (H, H),
            "wv": (H, H),
            "wo": (H, H),
            "w1": (H, F),
            "w2": (F, H),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        if self.embedding.shape != (cfg.vocab_size, E):
            raise ValueError(f"embedding has shape {self.embedding.shape}")
        if len(self.offramps) != cfg.num_layers:
            raise ValueError("need one off-ramp per layer")
        self.spans.validate(cfg)

    def head_weights(self, head: int) -> "HeadWeights":
        d = self.config.head_dim
        cols = slice(head * d, (head + 1) * d)
        return HeadWeights(self.wq[:, cols], self.wk[:, cols], self.wv[:, cols])

    def with_spans(self, spans) -> "EncoderBundle":
        return replace(self, spans=AttentionSpans(spans))


@dataclass(frozen=True)
class HeadWeights:
    wq: QuantTensor
    wk: QuantTensor
    wv: QuantTensor


@dataclass
class LayerOps:
    macs: int = 0
    vmacs: int = 0
    vmacs_skipped: int = 0
    softmax_rows: int = 0
    layernorm_rows: int = 0
    elementwise_ops: int = 0
    entropy_evals: int = 0
    heads_skipped: int = 0
    operand_bytes: int = 0
    matmuls: list = field(default_factory=list)  # (rows, inner, cols)

    def record(self, stats) -> None:
        self.macs += stats.macs
        self.vmacs += stats.vmacs
        self.vmacs_skipped += stats.vmacs_skipped
        rows, inner, cols = stats.shape
        self.operand_bytes += rows * inner + inner * cols
        self.matmuls.append(stats.shape)

    def __add__(self, other: "LayerOps") -> "LayerOps":
        return LayerOps(
            macs=self.macs + other.macs,
            vmacs=self.vmacs + other.vmacs,
            vmacs_skipped=self.vmacs_skipped + other.vmacs_skipped,
            softmax_rows=self.softmax_rows + other.softmax_rows,
            layernorm_rows=self.layernorm_rows + other.layernorm_rows,
            elementwise_ops=self.elementwise_ops + other.elementwise_ops,
            entropy_evals=self.entropy_evals + other.entropy_evals,
            heads_skipped=self.heads_skipped + other.heads_skipped,
            operand_bytes=self.operand_bytes + other.operand_bytes,
            matmuls=self.matmuls + other.matmuls,
        )


@dataclass
class OpTrace:
    """Operation counts of one forward pass.

    ``embedding`` covers the lookup and E->H projection, ``layers[i]`` the
    i-th encoder block and ``offramps[i]`` the i-th off-ramp classifier plus
    its entropy assessment. Row lengths are shared by all rows in a model.
    """

    tile_n: int
    softmax_row_len: int
    layernorm_row_len: int
    embedding: LayerOps = field(default_factory=LayerOps)
    layers: list = field(default_factory=list)
    offramps: list = field(default_factory=list)

    @property
    def heads_skipped(self) -> int:
        return sum(l.heads_skipped for l in self.layers)

    def layer_total(self, i: int) -> LayerOps:
        """Block i plus its off-ramp (plus the embedding frontend for i = 0)."""
        ops = self.layers[i] + self.offramps[i]
        return self.embedding + ops if i == 0 else ops

    def total(self) -> LayerOps:
        out = LayerOps()
        for i in range(len(self.layers)):
            out = out + self.layer_total(i)
        return out

    def subset(self, start: int, stop: int) -> "OpTrace":
        """Trace restricted to layers [start, stop) (0-based)."""
        return OpTrace(
            self.tile_n,
            self.softmax_row_len,
            self.layernorm_row_len,
            self.embedding if start == 0 else LayerOps(),
            self.layers[start:stop],
            self.offramps[start:stop],
        )


# ---------------------------------------------------------------- SFU kernels


def masked_softmax(A, mask, tile_n: int = 16) -> np.ndarray:
    """Row softmax with span masking, three tiled passes, no division.

    Pass 1 takes the row max over n-wide tiles, pass 2 accumulates
    sum(exp(a - max)) tile by tile, pass 3 writes exp(a - max - ln(sum)) * mask.
    """
    A = np.asarray(A, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    rows, cols = A.shape
    nt = -(-cols // tile_n)
    padded = np.full((rows, nt * tile_n), -np.inf)
    padded[:, :cols] = A
    tiles = padded.reshape(rows, nt, tile_n)

    row_max = tiles.max(axis=2).max(axis=1)
    shifted = tiles - row_max[:, None, None]
    sum_exp = np.zeros(rows)
    for j in range(nt):
        sum_exp += np.exp(shifted[:, j, :]).sum(axis=1)
    log_sum = np.log(sum_exp)
    out = np.exp(shifted - log_sum[:, None, None]).reshape(rows, -1)[:, :cols]
    return out * mask


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis with a running mean and Var = E[x^2] - E[x]^2."""
    x = np.asarray(x, dtype=np.float64)
    h = x.shape[-1]
    mean = np.zeros(x.shape[:-1])
    mean_sq = np.zeros(x.shape[:-1])
    for k in range(h):
        v = x[..., k]
        mean += (v - mean) / (k + 1)
        mean_sq += (v * v - mean_sq) / (k + 1)
    var = np.maximum(mean_sq - mean * mean, 0.0)
    return (x - mean[..., None]) / np.sqrt(var + eps)[..., None] * gamma + beta


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


# ------------------------------------------------------------------- forward


def _mm(a: QuantTensor, b: QuantTensor, tile_n: int, sparse: bool, ops: LayerOps) -> QuantTensor:
    out, _, stats = matmul_tiled(a, b, tile_n, skip_zero=sparse, return_accumulator=True)
    # without zero gating every VMAC fires at full cost
    ops.record(stats if sparse else replace(stats, vmacs_skipped=0))
    return out


def attention_head(
    hidden: QuantTensor,
    head_weights: HeadWeights,
    span: int,
    tile_n: int = 16,
    *,
    ramp: float = 0.0,
    sparse: bool = True,
    ops: LayerOps | None = None,
) -> tuple[QuantTensor, LayerOps]:
    """One self-attention head; a null span skips the head and writes zeros."""
    ops = LayerOps() if ops is None else ops
    seq_len = hidden.shape[0]
    d = head_weights.wq.shape[1]
    if span > seq_len:
        raise ValueError(f"span {span} exceeds seq_len {seq_len}")
    mask = span_mask(span, seq_len, ramp)
    if not mask.any():
        ops.heads_skipped += 1
        zero = FloatFormat(hidden.format.exponent_bits)
        return QuantTensor(np.zeros((seq_len, d), dtype=np.uint8), zero), ops

    q = _mm(hidden, head_weights.wq, tile_n, sparse, ops)
    k = _mm(hidden, head_weights.wk, tile_n, sparse, ops)
    v = _mm(hidden, head_weights.wv, tile_n, sparse, ops)
    scores = _mm(q, k.T, tile_n, sparse, ops).values() / math.sqrt(d)
    probs = masked_softmax(scores, mask, tile_n)
    ops.elementwise_ops += seq_len * seq_len  # score scaling
    ops.softmax_rows += seq_len
    context = _mm(quantize_fit(probs, hidden.format.exponent_bits), v, tile_n, sparse, ops)
    return context, ops


def embed(tokens, bundle: EncoderBundle, *, sparse: bool = True) -> QuantTensor:
    cfg = bundle.config
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size > cfg.seq_len:
        raise ValueError(f"sentence of {toks.size} tokens exceeds seq_len {cfg.seq_len}")
    if toks.size and (toks.min() < 0 or toks.max() >= cfg.vocab_size):
        raise ValueError("token index out of range")
    padded = np.full(cfg.seq_len, PAD_TOKEN, dtype=np.int64)
    padded[: toks.size] = toks
    if sparse:
        return bundle.embedding.gather_rows(padded)
    table = decode_bitmask(bundle.embedding)
    return table[padded]


def encoder_block(
    h: QuantTensor, bundle: EncoderBundle, tile_n: int = 16, *, sparse: bool = True
) -> tuple[QuantTensor, LayerOps]:
    cfg = bundle.config
    ops = LayerOps()
    e_bits = cfg.exponent_bits
    T, H = h.shape

    heads = [
        attention_head(
            h, bundle.head_weights(i), span, tile_n, ramp=cfg.span_ramp, sparse=sparse, ops=ops
        )[0]
        for i, span in enumerate(bundle.spans)
    ]
    concat = quantize_fit(np.concatenate([c.values() for c in heads], axis=1), e_bits)
    attn = _mm(concat, bundle.wo, tile_n, sparse, ops)

    x = layer_norm(h.values() + attn.values(), *bundle.ln_attn, cfg.layer_norm_eps)
    ops.elementwise_ops += T * H
    ops.layernorm_rows += T
    xq = quantize_fit(x, e_bits)

    f1 = _mm(xq, bundle.w1, tile_n, sparse, ops)
    f1q = quantize_fit(gelu(f1.values()), e_bits)
    ops.elementwise_ops += T * cfg.ffn_dim
    f2 = _mm(f1q, bundle.w2, tile_n, sparse, ops)

    y = layer_norm(xq.values() + f2.values(), *bundle.ln_ffn, cfg.layer_norm_eps)
    ops.elementwise_ops += T * H
    ops.layernorm_rows += T
    return quantize_fit(y, e_bits), ops


def offramp_logits(
    h: QuantTensor, ramp: OffRamp, tile_n: int = 16, *, sparse: bool = True
) -> tuple[np.ndarray, LayerOps]:
    """Classify from the first token: tanh(h_0 P) C."""
    ops = LayerOps()
    pooled = _mm(h[0:1], ramp.pooler, tile_n, sparse, ops)
    pooled_q = quantize_fit(np.tanh(pooled.values()), h.format.exponent_bits)
    ops.elementwise_ops += pooled.size
    logits = _mm(pooled_q, ramp.classifier, tile_n, sparse, ops).values()[0]
    ops.entropy_evals += 1
    return logits, ops


@dataclass
class ForwardResult:
    hidden: list  # QuantTensor per layer
    logits: list  # np.ndarray per layer
    trace: OpTrace


def iter_layers(
    tokens, bundle: EncoderBundle, tile_n: int = 16, *, sparse: bool = True
) -> Iterator[tuple[QuantTensor, np.ndarray, OpTrace]]:
    """Yield (hidden, off-ramp logits, running trace) one layer at a time."""
    cfg = bundle.config
    trace = OpTrace(tile_n, cfg.seq_len, cfg.hidden_dim)
    emb = embed(tokens, bundle, sparse=sparse)
    h = _mm(emb, bundle.embed_proj, tile_n, sparse, trace.embedding)
    for layer in range(cfg.num_layers):
        h, ops = encoder_block(h, bundle, tile_n, sparse=sparse)
        logits, ramp_ops = offramp_logits(h, bundle.offramps[layer], tile_n, sparse=sparse)
        trace.layers.append(ops)
        trace.offramps.append(ramp_ops)
        yield h, logits, trace


def encoder_forward(
    tokens, bundle: EncoderBundle, upto_layer: int | None = None, tile_n: int = 16, *, sparse: bool = True
) -> ForwardResult:
    cfg = bundle.config
    upto = cfg.num_layers if upto_layer is None else upto_layer
    if not 1 <= upto <= cfg.num_layers:
        raise ValueError(f"upto_layer must be in 1..{cfg.num_layers}")
    hidden, logits = [], []
    trace = None
    for i, (h, lg, trace) in enumerate(iter_layers(tokens, bundle, tile_n, sparse=sparse)):
        hidden.append(h)
        logits.append(lg)
        if i + 1 == upto:
            break
    return ForwardResult(hidden, logits, trace)


# --------------------------------------------------------------------- FLOPs

SOFTMAX_FLOPS_PER_ELEM = 5  # max, subtract, exp, accumulate, normalize
LAYERNORM_FLOPS_PER_ELEM = 8
GELU_FLOPS_PER_ELEM = 8


def layer_flops(cfg: EncoderConfig, spans: AttentionSpans | None = None) -> int:
    """Analytic FLOPs of one encoder block; null-span heads cost nothing."""
    T, H, F, d = cfg.seq_len, cfg.hidden_dim, cfg.ffn_dim, cfg.head_dim
    spans = AttentionSpans.full(cfg) if spans is None else spans
    active = sum(1 for s in spans if s > 0)
    per_head = (
        3 * 2 * T * H * d  # Q, K, V projections
        + 2 * T * T * d  # scores
        + T * T  # scaling
        + (SOFTMAX_FLOPS_PER_ELEM + 1) * T * T  # softmax and span mask
        + 2 * T * T * d  # context
    )
    rest = (
        2 * T * H * H  # output projection
        + 2 * (T * H + LAYERNORM_FLOPS_PER_ELEM * T * H)  # two add & norm
        + 2 * 2 * T * H * F  # FFN
        + GELU_FLOPS_PER_ELEM * T * F
    )
    return active * per_head + rest


def flops_count(spans: AttentionSpans, cfg: EncoderConfig) -> dict:
    dense = cfg.num_layers * layer_flops(cfg)
    predicated = cfg.num_layers * layer_flops(cfg, spans)
    ratio = dense / predicated if predicated else math.inf
    return {"dense_flops": dense, "predicated_flops": predicated, "ratio": ratio}


# ------------------------------------------------------------------ builders


def _random_quant(rng, shape, scale, e_bits, density=1.0) -> QuantTensor:
    w = rng.normal(0.0, scale, size=shape)
    if density < 1.0:
        w = magnitude_prune(w, density)
    return quantize_fit(w, e_bits)


def random_bundle(
    cfg: EncoderConfig,
    seed: int = 0,
    *,
    spans: Sequence[int] | None = None,
    embedding_density: float = 0.4,
    encoder_density: float = 1.0,
    offramp_gain: float = 1.0,
    offramp_growth: float = 0.5,
) -> EncoderBundle:
    """Synthetic bundle with Gaussian weights.

    Off-ramp ``l`` (0-based) has classifier gain ``offramp_gain * (1 +
    offramp_growth * l)`` so deeper exits are more confident on average,
    which gives entropy traces a realistic downward trend.
    """
    rng = np.random.default_rng(seed)
    e = cfg.exponent_bits
    H, F, E, K = cfg.hidden_dim, cfg.ffn_dim, cfg.embed_dim, cfg.num_classes
    emb = rng.normal(0.0, 1.0, size=(cfg.vocab_size, E))
    emb = magnitude_prune(emb, embedding_density)
    emb_q = quantize_fit(emb, e)
    w = lambda shape, fan_in: _random_quant(rng, shape, 1.0 / math.sqrt(fan_in), e, encoder_density)
    ramps = []
    for layer in range(cfg.num_layers):
        gain = offramp_gain * (1.0 + offramp_growth * layer)
        pooler = _random_quant(rng, (H, H), 1.0 / math.sqrt(H), e)
        clf = _random_quant(rng, (H, K), gain * 2.0 / math.sqrt(H), e)
        ramps.append(OffRamp(pooler, clf))
    return EncoderBundle(
        config=cfg,
        embedding=encode_bitmask(emb_q),
        embed_proj=w((E, H), E),
        wq=w((H, H), H),
        wk=w((H, H), H),
        wv=w((H, H), H),
        wo=w((H, H), H),
        w1=w((H, F), H),
        w2=w((F, H), F),
        ln_attn=(np.ones(H), np.zeros(H)),
        ln_ffn=(np.ones(H), np.zeros(H)),
        offramps=tuple(ramps),
        spans=AttentionSpans(spans if spans is not None else (cfg.seq_len,) * cfg.num_heads),
    )


def random_sentences(cfg: EncoderConfig, count: int, seed: int = 0, min_len: int = 2) -> list:
    """Seeded synthetic token lists; token 0 is reserved for padding."""
    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, cfg.seq_len + 1, size=count)
    return [rng.integers(1, cfg.vocab_size, size=int(n)).tolist() for n in lengths]


# -------------------------------------------------------------------- cycles


@dataclass(frozen=True)
class SfuCosts:
    """SFU cycle charges; row-wise kernels process ``tile_n`` elements per cycle."""

    softmax_passes: int = 3
    layernorm_passes: int = 2
    entropy_cycles: int = 8
    lut_cycles: int = 1


def account_cycles(trace: OpTrace, n: int | None = None, sfu: SfuCosts = SfuCosts()) -> int:
    """PU tiling cycles plus SFU cycles; depends on shapes only."""
    n = trace.tile_n if n is None else n
    ops = trace.total()
    per = lambda length: -(-length // n)
    pu = sum(tile_cycles(r, k, c, n) for r, k, c in ops.matmuls)
    sfu_cycles = (
        ops.softmax_rows * sfu.softmax_passes * per(trace.softmax_row_len)
        + ops.layernorm_rows * sfu.layernorm_passes * per(trace.layernorm_row_len)
        + per(ops.elementwise_ops)
        + ops.entropy_evals * sfu.entropy_cycles
    )
    return pu + sfu_cycles
