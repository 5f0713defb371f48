"""Early exit and sentence-level DVFS on a small synthetic encoder.

Builds a 12-layer toy bundle, trains an exit-layer predictor from entropy
traces, then compares the three policies on the same sentences.

Run: python3 demos/early_exit_and_dvfs.py
"""

import numpy as np

from edgeinfer.earlyexit import TrainParams, distill_lut, train_predictor
from edgeinfer.model import EncoderConfig, random_bundle, random_sentences
from edgeinfer.simulator import Accelerator, PolicyConfig, run_stream

THRESHOLD = 0.4
TARGET = 1e-3  # seconds per sentence

cfg = EncoderConfig.toy(num_layers=12)
accel = Accelerator(random_bundle(cfg, seed=0))

# Entropy traces from full-depth runs become (H1, exit layer) training pairs.
train = random_sentences(cfg, 100, seed=2)
base_cfg = PolicyConfig("base", latency_target=TARGET)
traces = np.array([r.entropies for r in run_stream(train, accel, base_cfg).results])
predictor = distill_lut(train_predictor(traces, THRESHOLD, TrainParams(epochs=100), num_classes=cfg.num_classes))
print(f"predictor LUT: {len(predictor.lut_edges)} bins, layers {sorted(set(predictor.lut_layers.tolist()))}")

sentences = random_sentences(cfg, 50, seed=1)
reports = {}
for policy in ("base", "ee", "lai"):
    pc = PolicyConfig(policy, THRESHOLD, latency_target=TARGET)
    reports[policy] = run_stream(sentences, accel, pc, predictor if policy == "lai" else None)

print(f"{'policy':<6} {'exit':>6} {'latency us':>11} {'energy nJ':>10} {'misses':>7}")
for name, rep in reports.items():
    print(
        f"{name:<6} {rep.mean_exit_layer:6.2f} {rep.mean_latency * 1e6:11.2f}"
        f" {rep.mean_energy * 1e9:10.2f} {rep.deadline_miss_rate:7.2%}"
    )

base = reports["base"].mean_energy
print(f"EE saves {base / reports['ee'].mean_energy:.2f}x, LAI saves {base / reports['lai'].mean_energy:.2f}x (calibrated constants)")

# One sentence in detail: which voltage each layer range ran at.
r = reports["lai"].results[0]
print("first sentence schedule (first, last, V, Hz):", r.vf_schedule)
