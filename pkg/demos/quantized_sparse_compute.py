"""The 8-bit adaptive float and zero-skipping tiled matmul.

Run: python3 demos/quantized_sparse_compute.py
"""

import numpy as np

from edgeinfer.model import EncoderConfig, TABLE_SPANS, flops_count
from edgeinfer.numerics import matmul_tiled, quantize_fit
from edgeinfer.sparse import encode_bitmask, magnitude_prune, storage_footprint

rng = np.random.default_rng(0)
x = rng.normal(size=(64, 64))
q = quantize_fit(x, exponent_bits=4)
err = np.abs(q.values() - x) / np.abs(x)
print(f"format {q.format}: median relative error {np.median(err):.4f}, max {err.max():.4f}")

# Pruning zeroes whole operand vectors now and then; those VMACs are gated.
for density in (1.0, 0.5, 0.1):
    a = quantize_fit(magnitude_prune(x, density))
    _, cycles, skipped = matmul_tiled(a, q, tile_n=4)
    vmacs = 64 * 64 * (64 // 4)  # one per output element per K tile
    print(f"density {density:.1f}: {cycles} cycles, {skipped}/{vmacs} VMACs skipped")

s = encode_bitmask(quantize_fit(magnitude_prune(x, 0.4)))
print("bitmask footprint at 40% density:", storage_footprint(s))

cfg = EncoderConfig.albert_base()
for name, spans in TABLE_SPANS.items():
    r = flops_count(spans, cfg)
    print(f"{name:<6} spans {list(spans)} -> {r['ratio']:.3f}x fewer FLOPs")
