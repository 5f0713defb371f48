"""Sentence-level voltage/frequency scaling and the quadratic energy model.

All absolute constants here are calibrated stand-ins. Comparisons between
policies are ratios and do not depend on the absolute capacitance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .model import OpTrace, SfuCosts, account_cycles

NOMINAL_VOLTAGE = 0.8
NOMINAL_FREQUENCY = 1e9
STANDBY_VOLTAGE = 0.5


class DeadlineMissed(ValueError):
    """The deadline has already passed, so no frequency can meet it."""


@dataclass(frozen=True, order=True)
class VfPoint:
    voltage: float
    max_frequency: float


def linear_fmax(voltage: float, v_threshold: float = 0.3) -> float:
    """Default V -> f_max curve: linear above a threshold, 1 GHz at 0.8 V."""
    return NOMINAL_FREQUENCY * (voltage - v_threshold) / (NOMINAL_VOLTAGE - v_threshold)


@dataclass(frozen=True)
class VfTable:
    points: tuple[VfPoint, ...]
    standby_voltage: float = STANDBY_VOLTAGE
    calibrated: bool = True

    def __post_init__(self):
        pts = tuple(self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise ValueError("empty VF table")
        for a, b in zip(pts, pts[1:]):
            if not (b.voltage > a.voltage and b.max_frequency > a.max_frequency):
                raise ValueError("VF points must be strictly increasing in voltage and frequency")

    @property
    def nominal(self) -> VfPoint:
        return self.points[-1]

    @property
    def lowest(self) -> VfPoint:
        return self.points[0]

    @classmethod
    def default(cls, v_min=0.5, v_max=0.8, step=0.025, v_threshold=0.3) -> "VfTable":
        count = int(round((v_max - v_min) / step)) + 1
        volts = [round(v_min + i * step, 6) for i in range(count)]
        return cls(tuple(VfPoint(v, linear_fmax(v, v_threshold)) for v in volts))

    def to_dict(self) -> dict:
        return {
            "points": [[p.voltage, p.max_frequency] for p in self.points],
            "standby_voltage": self.standby_voltage,
            "calibrated": self.calibrated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VfTable":
        pts = tuple(VfPoint(float(v), float(f)) for v, f in d["points"])
        return cls(pts, float(d.get("standby_voltage", STANDBY_VOLTAGE)), bool(d.get("calibrated", True)))


@dataclass(frozen=True)
class LdoAdpllModel:
    ldo_step_voltage: float = 0.05
    ldo_step_time: float = 3.8e-9
    relock_time: float = 50e-9
    settle_cap: float = 100e-9
    adpll_power: float = 2.46e-3
    ldo_peak_efficiency: float = 0.992
    ldo_step_energy: float = 1e-12  # per 50 mV step
    calibrated: bool = True

    def steps(self, dv: float) -> int:
        # rounding guards 0.3 / 0.05 against landing a hair above 6
        return math.ceil(round(abs(dv) / self.ldo_step_voltage, 9))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LdoAdpllModel":
        return cls(**d)


@dataclass(frozen=True)
class Transition:
    time: float
    energy: float


def transition(model: LdoAdpllModel, src: VfPoint, dst: VfPoint) -> Transition:
    steps = model.steps(dst.voltage - src.voltage)
    time = min(steps * model.ldo_step_time + model.relock_time, model.settle_cap)
    return Transition(time, model.adpll_power * time + model.ldo_step_energy * steps)


def required_frequency(n_cycles: int, deadline: float, elapsed: float) -> float:
    if n_cycles < 0:
        raise ValueError("n_cycles must be >= 0")
    if deadline <= elapsed:
        raise DeadlineMissed(f"deadline {deadline} s already passed at {elapsed} s")
    return n_cycles / (deadline - elapsed)


def select_vf(table: VfTable, f_req: float) -> tuple[VfPoint, bool]:
    """Lowest-voltage point whose f_max covers ``f_req``; nominal and False if none does."""
    for p in table.points:
        if p.max_frequency >= f_req:
            return p, True
    return table.nominal, False


@dataclass(frozen=True)
class EnergyModel:
    """Energy = V^2 * (alpha * C * cycles + sum of per-op weights).

    Weights are in joules per volt squared. A skipped VMAC costs
    ``skip_fraction`` of a full one: its operands are still fetched but the
    multiplier array is gated.
    """

    alpha: float = 0.25
    cap_effective: float = 100e-12
    mac: float = 0.25e-12
    skip_fraction: float = 1 / 1.65
    softmax_elem: float = 2e-12
    layernorm_elem: float = 2e-12
    elementwise: float = 0.5e-12
    entropy_eval: float = 20e-12
    memory_byte: float = 0.5e-12
    standby_power: float = 1e-3  # leakage at the standby voltage, watts
    sfu: SfuCosts = field(default_factory=SfuCosts)
    calibrated: bool = True

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if not 0 <= self.skip_fraction < 1:
            raise ValueError("skip_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyModel":
        d = dict(d)
        sfu = SfuCosts(**d.pop("sfu", {}))
        return cls(sfu=sfu, **d)


def switched_energy(model: EnergyModel, trace: OpTrace) -> float:
    """Voltage-independent factor of the energy: energy(v) = v^2 * this."""
    ops = trace.total()
    n = trace.tile_n
    vmac = model.mac * n
    full = ops.vmacs - ops.vmacs_skipped
    return (
        model.alpha * model.cap_effective * account_cycles(trace, sfu=model.sfu)
        + vmac * (full + model.skip_fraction * ops.vmacs_skipped)
        + model.softmax_elem * ops.softmax_rows * trace.softmax_row_len
        + model.layernorm_elem * ops.layernorm_rows * trace.layernorm_row_len
        + model.elementwise * ops.elementwise_ops
        + model.entropy_eval * ops.entropy_evals
        + model.memory_byte * ops.operand_bytes
    )


def energy(model: EnergyModel, voltage: float, trace: OpTrace, frequency: float | None = None) -> float:
    """Dynamic energy of ``trace`` at ``voltage``; independent of clock frequency."""
    return voltage * voltage * switched_energy(model, trace)


def load_json(path, cls):
    with open(path) as fh:
        return cls.from_dict(json.load(fh))
