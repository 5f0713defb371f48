"""Storing pruned embeddings in multi-level ReRAM cells.

Packs a bitmask-encoded embedding table into SLC/MLC cells, injects read
noise, and measures how often model predictions change.

Run: python3 demos/envm_fault_injection.py
"""

from edgeinfer.cli import agreement_closure
from edgeinfer.envm import MLC2, MLC3, SLC, envm_geometry, power_on_cost, run_trials
from edgeinfer.model import EncoderConfig, random_bundle, random_sentences
from edgeinfer.sparse import storage_footprint

cfg = EncoderConfig.toy(vocab_size=1000)
bundle = random_bundle(cfg, seed=0)
emb = bundle.embedding
fp = storage_footprint(emb)
print(f"embedding {emb.shape}, density {emb.nnz / emb.size:.2f}, {fp['total']} bytes stored")

evaluate = agreement_closure(bundle, random_sentences(cfg, 100, seed=4))
for cell in (SLC, MLC2, MLC3):
    stats = run_trials(emb, cell, SLC, evaluate, trials=100, seed=0)
    flipped = sum(w > 0 for w in stats.weight_flips)
    geo = envm_geometry(cell, fp["total"] / 1e6)
    print(
        f"{cell.name:<5} agreement mean {stats.mean_accuracy:.4f} min {stats.min_accuracy:.2f}"
        f"  trials with weight flips {flipped:3d}  area {geo['area_mm2']:.5f} mm^2"
    )

cost = power_on_cost(emb)
print(
    f"power-on vs DRAM+SRAM: {cost['ratios']['latency']:.0f}x faster,"
    f" {cost['ratios']['energy']:.3g}x less energy (calibrated constants)"
)
