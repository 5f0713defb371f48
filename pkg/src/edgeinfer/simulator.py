"""Base, conventional early-exit and latency-aware inference policies.

An ``Accelerator`` couples a bundle with the VF table, regulator model and
energy model, and caches forward passes per sentence so that several
policies can be compared on the same stream without recomputation. Cycle
counts depend only on shapes, so latency is fixed by the exit layer and the
clock schedule.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .dvfs import (
    DeadlineMissed,
    EnergyModel,
    LdoAdpllModel,
    VfPoint,
    VfTable,
    energy,
    required_frequency,
    select_vf,
    switched_energy,
    transition,
)
from .earlyexit import ExitPredictor, entropy_stable, predict_exit_layer
from .model import EncoderBundle, OpTrace, account_cycles, iter_layers

__all__ = [
    "Accelerator",
    "PolicyConfig",
    "SentenceResult",
    "StreamReport",
    "account_cycles",
    "oracle_predictor",
    "run_base",
    "run_conventional_ee",
    "run_latency_aware",
    "run_stream",
]

POLICIES = ("base", "ee", "lai")
TILE_SIZES = (2, 4, 8, 16, 32)

Predictor = Union[ExitPredictor, Callable[[tuple, float], int]]


@dataclass(frozen=True)
class PolicyConfig:
    policy: str = "base"
    entropy_threshold: float = 0.0
    latency_target: float = 50e-3  # seconds
    tile_n: int = 16

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.tile_n not in TILE_SIZES:
            raise ValueError(f"tile_n must be one of {TILE_SIZES}")
        if self.latency_target <= 0:
            raise ValueError("latency_target must be positive")
        if self.entropy_threshold < 0:
            raise ValueError("entropy_threshold must be >= 0")


@dataclass
class SentenceResult:
    policy: str
    exit_layer: int
    predicted_layer: int | None
    latency: float
    energy: float
    deadline_met: bool
    deadline_ok: bool
    cycles: int
    vf_schedule: list  # (first_layer, last_layer, voltage, frequency)
    entropies: list
    logits: np.ndarray
    transition_time: float = 0.0
    transition_energy: float = 0.0
    rampback_time: float = 0.0

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))


class _Lazy:
    """Forward pass of one sentence, advanced only as far as a policy needs."""

    def __init__(self, gen):
        self.gen = gen
        self.logits: list = []
        self.entropies: list = []
        self.trace: OpTrace | None = None

    def upto(self, layer: int) -> None:
        while len(self.logits) < layer:
            _, logits, self.trace = next(self.gen)
            self.logits.append(logits)
            self.entropies.append(entropy_stable(logits))


class Accelerator:
    def __init__(
        self,
        bundle: EncoderBundle,
        vf: VfTable | None = None,
        ldo: LdoAdpllModel | None = None,
        energy_model: EnergyModel | None = None,
        *,
        tile_n: int = 16,
        sparse: bool = True,
    ):
        self.bundle = bundle
        self.vf = vf or VfTable.default()
        self.ldo = ldo or LdoAdpllModel()
        self.energy_model = energy_model or EnergyModel()
        self.tile_n = tile_n
        self.sparse = sparse
        self._cache: dict = {}

    @property
    def num_layers(self) -> int:
        return self.bundle.config.num_layers

    def forward(self, tokens, layer: int) -> _Lazy:
        key = tuple(int(t) for t in tokens)
        lazy = self._cache.get(key)
        if lazy is None:
            lazy = _Lazy(iter_layers(key, self.bundle, self.tile_n, sparse=self.sparse))
            self._cache[key] = lazy
        lazy.upto(layer)
        return lazy

    def clear_cache(self) -> None:
        self._cache.clear()

    def segment(self, lazy: _Lazy, first: int, last: int) -> OpTrace:
        """Trace of 1-based layers first..last."""
        return lazy.trace.subset(first - 1, last)

    def cycles(self, trace: OpTrace) -> int:
        return account_cycles(trace, sfu=self.energy_model.sfu)

    def block_cycles(self, lazy: _Lazy) -> int:
        """Cycles of one encoder block plus off-ramp, excluding the embedding frontend."""
        one = OpTrace(lazy.trace.tile_n, lazy.trace.softmax_row_len, lazy.trace.layernorm_row_len)
        one.layers = lazy.trace.layers[:1]
        one.offramps = lazy.trace.offramps[:1]
        return self.cycles(one)


def _nominal_run(accel: Accelerator, tokens, cfg: PolicyConfig, exit_layer: int, policy: str, lazy) -> SentenceResult:
    nominal = accel.vf.nominal
    seg = accel.segment(lazy, 1, exit_layer)
    cycles = accel.cycles(seg)
    latency = cycles / nominal.max_frequency
    return SentenceResult(
        policy=policy,
        exit_layer=exit_layer,
        predicted_layer=None,
        latency=latency,
        energy=energy(accel.energy_model, nominal.voltage, seg),
        deadline_met=latency <= cfg.latency_target,
        deadline_ok=True,
        cycles=cycles,
        vf_schedule=[(1, exit_layer, nominal.voltage, nominal.max_frequency)],
        entropies=lazy.entropies[:exit_layer],
        logits=lazy.logits[exit_layer - 1],
    )


def run_base(tokens, accel: Accelerator, cfg: PolicyConfig | None = None) -> SentenceResult:
    """Every layer at nominal voltage and maximum frequency."""
    cfg = cfg or PolicyConfig("base")
    layers = accel.num_layers
    return _nominal_run(accel, tokens, cfg, layers, "base", accel.forward(tokens, layers))


def run_conventional_ee(tokens, accel: Accelerator, cfg: PolicyConfig) -> SentenceResult:
    """Exit at the first layer whose off-ramp entropy is below the threshold."""
    layer = 0
    while True:
        layer += 1
        lazy = accel.forward(tokens, layer)
        if lazy.entropies[layer - 1] < cfg.entropy_threshold or layer == accel.num_layers:
            break
    return _nominal_run(accel, tokens, cfg, layer, "ee", lazy)


def _predict(predictor: Predictor, tokens, h1: float, num_layers: int) -> int:
    if isinstance(predictor, ExitPredictor):
        layer = predict_exit_layer(predictor, h1)
    else:
        layer = int(predictor(tuple(tokens), h1))
    return min(max(layer, 1), num_layers)


def run_latency_aware(tokens, accel: Accelerator, predictor: Predictor, cfg: PolicyConfig) -> SentenceResult:
    """Layer 1 at nominal, then the rest at the cheapest point meeting the deadline.

    The frequency budget reserves two worst-case regulator transitions (down
    and back up) inside the latency target, so whenever the selected point is
    feasible the sentence finishes, and the supply is back at nominal,
    within the target. If a lower voltage would not save energy once the
    transitions are paid for, the remaining layers stay at nominal.
    """
    vf, ldo, em = accel.vf, accel.ldo, accel.energy_model
    nominal = vf.nominal
    lazy = accel.forward(tokens, 1)
    first = accel.segment(lazy, 1, 1)
    lut = em.sfu.lut_cycles
    elapsed_cycles = accel.cycles(first)
    h1 = lazy.entropies[0]
    if h1 < cfg.entropy_threshold:
        latency = elapsed_cycles / nominal.max_frequency
        return SentenceResult(
            "lai", 1, None, latency, energy(em, nominal.voltage, first),
            latency <= cfg.latency_target, True, elapsed_cycles,
            [(1, 1, nominal.voltage, nominal.max_frequency)], lazy.entropies[:1], lazy.logits[0],
        )

    predicted = _predict(predictor, tokens, h1, accel.num_layers)
    elapsed_cycles += lut
    elapsed = elapsed_cycles / nominal.max_frequency
    # the lookup's energy is folded into the off-ramp assessment charge
    base_energy = energy(em, nominal.voltage, first)
    schedule = [(1, 1, nominal.voltage, nominal.max_frequency)]
    if predicted == 1:
        return SentenceResult(
            "lai", 1, 1, elapsed, base_energy, elapsed <= cfg.latency_target, True, elapsed_cycles,
            schedule, lazy.entropies[:1], lazy.logits[0],
        )

    remaining = (predicted - 1) * accel.block_cycles(lazy)
    try:
        f_req = required_frequency(remaining, cfg.latency_target - 2 * ldo.settle_cap, elapsed)
        point, ok = select_vf(vf, f_req)
    except DeadlineMissed:
        point, ok, f_req = nominal, False, nominal.max_frequency

    # run layers 2..exit, stopping early on a confident off-ramp
    layer = 1
    while layer < predicted:
        layer += 1
        lazy = accel.forward(tokens, layer)
        if lazy.entropies[layer - 1] < cfg.entropy_threshold:
            break
    rest = accel.segment(lazy, 2, layer)
    rest_cycles = accel.cycles(rest)
    rest_sw = switched_energy(em, rest)

    down = transition(ldo, nominal, point)
    up = transition(ldo, point, nominal)
    scaled = point.voltage**2 * rest_sw + down.energy + up.energy
    at_nominal = nominal.voltage**2 * rest_sw
    if point != nominal and ok and scaled < at_nominal:
        freq = min(f_req, point.max_frequency) if f_req > 0 else point.max_frequency
        t_trans, e_trans, rampback = down.time, down.energy + up.energy, up.time
        volt, rest_energy = point.voltage, point.voltage**2 * rest_sw
    else:
        freq, t_trans, e_trans, rampback = nominal.max_frequency, 0.0, 0.0, 0.0
        volt, rest_energy = nominal.voltage, at_nominal
    latency = elapsed + t_trans + rest_cycles / freq
    schedule.append((2, layer, volt, freq))
    return SentenceResult(
        policy="lai",
        exit_layer=layer,
        predicted_layer=predicted,
        latency=latency,
        energy=base_energy + rest_energy + e_trans,
        deadline_met=latency <= cfg.latency_target,
        deadline_ok=ok,
        cycles=elapsed_cycles + rest_cycles,
        vf_schedule=schedule,
        entropies=lazy.entropies[:layer],
        logits=lazy.logits[layer - 1],
        transition_time=t_trans,
        transition_energy=e_trans,
        rampback_time=rampback,
    )


def oracle_predictor(accel: Accelerator, threshold: float) -> Callable[[tuple, float], int]:
    """Predictor that returns the true early-exit layer of each sentence."""

    def predict(tokens, h1):
        return run_conventional_ee(tokens, accel, PolicyConfig("ee", threshold)).exit_layer

    return predict


def run_sentence(tokens, accel: Accelerator, cfg: PolicyConfig, predictor: Predictor | None = None) -> SentenceResult:
    if cfg.policy == "base":
        return run_base(tokens, accel, cfg)
    if cfg.policy == "ee":
        return run_conventional_ee(tokens, accel, cfg)
    if predictor is None:
        raise ValueError("latency-aware policy needs a predictor")
    return run_latency_aware(tokens, accel, predictor, cfg)


@dataclass
class StreamReport:
    policy: str
    results: list
    mean_exit_layer: float
    mean_latency: float
    mean_energy: float
    deadline_miss_rate: float
    idle_energy: float
    total_energy: float

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("results")
        return d


def run_stream(
    sentences: Sequence,
    accel: Accelerator,
    cfg: PolicyConfig,
    predictor: Predictor | None = None,
) -> StreamReport:
    """Run sentences back to back, one per latency-target period.

    Time left in each period after the sentence (and any ramp back to
    nominal) is spent idle at the standby voltage and charged leakage.
    """
    if len(sentences) == 0:
        raise ValueError("empty sentence stream")
    results = [run_sentence(s, accel, cfg, predictor) for s in sentences]
    idle = sum(
        max(cfg.latency_target - r.latency - r.rampback_time, 0.0) * accel.energy_model.standby_power
        for r in results
    )
    active = sum(r.energy for r in results)
    n = len(results)
    return StreamReport(
        policy=cfg.policy,
        results=results,
        mean_exit_layer=sum(r.exit_layer for r in results) / n,
        mean_latency=sum(r.latency for r in results) / n,
        mean_energy=active / n,
        deadline_miss_rate=sum(not r.deadline_met for r in results) / n,
        idle_energy=idle,
        total_energy=active + idle,
    )
