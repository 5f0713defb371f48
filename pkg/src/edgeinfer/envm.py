"""Multi-level-cell ReRAM storage for bitmask-encoded embeddings.

The mask goes to single-level cells and the payload to multi-level cells.
Each 8-bit payload code is split LSB-first into ``ceil(8 / b)`` cells of
``b`` bits, stored as straight binary levels; unused high bits of the last
cell are zero. A read returns the programmed level plus Gaussian noise
(sigma in units of the level spacing), decoded to the nearest level.

Default sigmas are calibrated stand-ins: they put the per-cell misread
probability at about 1e-12 (SLC), 1e-9 (MLC2) and 1e-4 (MLC3).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from statistics import NormalDist
from typing import Callable, NamedTuple

import numpy as np

from .numerics import FloatFormat
from .sparse import BitmaskTensor, decode_bitmask, storage_footprint

_STD = NormalDist()


def misread_probability(sigma: float, bits_per_cell: int) -> float:
    """Average per-cell misread for uniformly used levels.

    Interior levels err on both sides and the two edge levels on one, giving
    2 (L - 1) / L * Q(0.5 / sigma).
    """
    if sigma == 0:
        return 0.0
    levels = 1 << bits_per_cell
    return 2 * (levels - 1) / levels * _STD.cdf(-0.5 / sigma)


def sigma_for_misread(p: float, bits_per_cell: int) -> float:
    levels = 1 << bits_per_cell
    q = p * levels / (2 * (levels - 1))
    return 0.5 / -_STD.inv_cdf(q)


@dataclass(frozen=True)
class CellConfig:
    name: str
    bits_per_cell: int
    level_sigma: float
    area_density: float  # mm^2 per MB
    read_latency: float  # ns
    read_energy: float = 6e-5  # pJ per bit
    calibrated: bool = True

    def __post_init__(self):
        if self.bits_per_cell not in (1, 2, 3):
            raise ValueError(f"bits_per_cell must be 1, 2 or 3, got {self.bits_per_cell}")
        if self.level_sigma < 0:
            raise ValueError("level_sigma must be >= 0")

    @property
    def levels(self) -> int:
        return 1 << self.bits_per_cell

    @property
    def cells_per_byte(self) -> int:
        return -(-8 // self.bits_per_cell)

    def with_sigma(self, sigma: float) -> "CellConfig":
        return CellConfig(**{**asdict(self), "level_sigma": float(sigma)})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CellConfig":
        return cls(**d)


SLC = CellConfig("SLC", 1, sigma_for_misread(1e-12, 1), 0.28, 1.21)
MLC2 = CellConfig("MLC2", 2, sigma_for_misread(1e-9, 2), 0.08, 1.54)
MLC3 = CellConfig("MLC3", 3, sigma_for_misread(1e-4, 3), 0.04, 2.96)
PRESETS = {c.name: c for c in (SLC, MLC2, MLC3)}


@dataclass(frozen=True)
class EnvmImage:
    mask_cells: np.ndarray  # level per SLC cell
    data_cells: np.ndarray  # level per MLC cell
    mask_cfg: CellConfig
    data_cfg: CellConfig
    shape: tuple[int, ...]
    format: FloatFormat

    @property
    def num_cells(self) -> int:
        return self.mask_cells.size + self.data_cells.size


def pack_embeddings(s: BitmaskTensor, data_cfg: CellConfig = MLC2, mask_cfg: CellConfig = SLC) -> EnvmImage:
    if mask_cfg.bits_per_cell != 1:
        raise ValueError("the mask must be stored in single-level cells")
    b = data_cfg.bits_per_cell
    shifts = np.arange(data_cfg.cells_per_byte) * b
    cells = (s.payload[:, None].astype(np.int64) >> shifts) & (data_cfg.levels - 1)
    return EnvmImage(
        s.mask.astype(np.uint8),
        cells.astype(np.uint8).reshape(-1),
        mask_cfg,
        data_cfg,
        s.shape,
        s.format,
    )


class AnalogRead(NamedTuple):
    mask: np.ndarray
    data: np.ndarray


def sample_analog(img: EnvmImage, seed: int) -> AnalogRead:
    """Analog read values; mask and data draw from independent streams."""
    mask_rng, data_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    mask = img.mask_cells + mask_rng.normal(0.0, 1.0, img.mask_cells.size) * img.mask_cfg.level_sigma
    data = img.data_cells + data_rng.normal(0.0, 1.0, img.data_cells.size) * img.data_cfg.level_sigma
    return AnalogRead(mask, data)


def decode_levels(analog: np.ndarray, levels: int) -> np.ndarray:
    return np.clip(np.rint(analog), 0, levels - 1).astype(np.uint8)


def inject_faults(img: EnvmImage, rng_seed: int) -> EnvmImage:
    if img.mask_cfg.level_sigma == 0 and img.data_cfg.level_sigma == 0:
        return img
    analog = sample_analog(img, rng_seed)
    return EnvmImage(
        decode_levels(analog.mask, img.mask_cfg.levels),
        decode_levels(analog.data, img.data_cfg.levels),
        img.mask_cfg,
        img.data_cfg,
        img.shape,
        img.format,
    )


class Readout(NamedTuple):
    tensor: BitmaskTensor
    corrupted: bool


def readout(img: EnvmImage) -> Readout:
    """Reassemble the bitmask tensor.

    If mask faults break popcount(mask) == payload length, the payload is
    truncated or zero-padded to fit and ``corrupted`` is set.
    """
    mask = img.mask_cells.astype(bool)
    k = img.data_cfg.cells_per_byte
    cells = img.data_cells.reshape(-1, k).astype(np.int64)
    shifts = np.arange(k) * img.data_cfg.bits_per_cell
    payload = (np.sum(cells << shifts, axis=1) & 0xFF).astype(np.uint8)
    want = int(mask.sum())
    corrupted = want != payload.size
    if corrupted:
        fixed = np.zeros(want, dtype=np.uint8)
        keep = min(want, payload.size)
        fixed[:keep] = payload[:keep]
        payload = fixed
    return Readout(BitmaskTensor(img.shape, mask, payload, img.format), corrupted)


@dataclass(frozen=True)
class TrialStats:
    trials: int
    mean_accuracy: float
    min_accuracy: float
    fault_free_accuracy: float
    accuracies: tuple[float, ...]
    cell_flips: tuple[int, ...]
    weight_flips: tuple[int, ...]
    corrupted: tuple[bool, ...]

    def to_dict(self) -> dict:
        return asdict(self)


def count_weight_flips(a: BitmaskTensor, b: BitmaskTensor) -> int:
    return int(np.count_nonzero(decode_bitmask(a).codes != decode_bitmask(b).codes))


def run_trials(
    s: BitmaskTensor,
    data_cfg: CellConfig,
    mask_cfg: CellConfig,
    model: Callable[[BitmaskTensor], float],
    trials: int = 100,
    seed: int = 0,
) -> TrialStats:
    """Evaluate ``model`` on independently faulted readouts, seed + i for trial i.

    Readouts identical to the source reuse the fault-free accuracy.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    img = pack_embeddings(s, data_cfg, mask_cfg)
    clean = model(s)
    accs, cell_flips, weight_flips, corrupted = [], [], [], []
    for t in range(trials):
        faulty = inject_faults(img, seed + t)
        flips = int(np.count_nonzero(faulty.mask_cells != img.mask_cells)) + int(
            np.count_nonzero(faulty.data_cells != img.data_cells)
        )
        read = readout(faulty)
        cell_flips.append(flips)
        corrupted.append(read.corrupted)
        if flips == 0:
            accs.append(clean)
            weight_flips.append(0)
            continue
        weight_flips.append(count_weight_flips(s, read.tensor))
        accs.append(float(model(read.tensor)))
    return TrialStats(
        trials,
        float(np.mean(accs)),
        float(np.min(accs)),
        float(clean),
        tuple(accs),
        tuple(cell_flips),
        tuple(weight_flips),
        tuple(corrupted),
    )


def envm_geometry(cfg: CellConfig, megabytes: float) -> dict:
    if megabytes < 0:
        raise ValueError("megabytes must be >= 0")
    return {"area_mm2": cfg.area_density * megabytes, "read_latency_ns": cfg.read_latency}


@dataclass(frozen=True)
class MemoryCosts:
    """Conventional power-on path: DRAM read, then SRAM write and read.

    Defaults are calibrated stand-ins, not device data.
    """

    dram_read_energy: float = 32.0  # pJ per byte
    dram_bandwidth: float = 12.8e9  # bytes per second
    sram_write_energy: float = 1.0  # pJ per byte
    sram_read_energy: float = 1.0  # pJ per byte
    sram_bandwidth: float = 16e9  # bytes per second
    envm_read_width: int = 256  # bytes per parallel ReRAM access
    calibrated: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryCosts":
        return cls(**d)


def power_on_cost(
    s: BitmaskTensor,
    data_cfg: CellConfig = MLC2,
    costs: MemoryCosts = MemoryCosts(),
    *,
    mask_cfg: CellConfig = SLC,
    power_cycles: int = 1,
) -> dict:
    """Cost of making the embeddings available after ``power_cycles`` wake-ups.

    Latency in seconds, energy in joules.
    """
    fp = storage_footprint(s)
    total = fp["total"]
    reads = lambda nbytes: -(-nbytes // costs.envm_read_width)
    envm_latency = 1e-9 * (
        reads(fp["mask_bytes"]) * mask_cfg.read_latency + reads(fp["payload_bytes"]) * data_cfg.read_latency
    )
    envm_energy = 1e-12 * 8 * (fp["mask_bytes"] * mask_cfg.read_energy + fp["payload_bytes"] * data_cfg.read_energy)
    conv_latency = total / costs.dram_bandwidth + 2 * total / costs.sram_bandwidth
    conv_energy = 1e-12 * total * (costs.dram_read_energy + costs.sram_write_energy + costs.sram_read_energy)
    envm = {"latency": envm_latency * power_cycles, "energy": envm_energy * power_cycles}
    conv = {"latency": conv_latency * power_cycles, "energy": conv_energy * power_cycles}
    ratio = lambda a, b: a / b if b else (math.inf if a else 1.0)
    return {
        "envm": envm,
        "conventional": conv,
        "ratios": {
            "latency": ratio(conv["latency"], envm["latency"]),
            "energy": ratio(conv["energy"], envm["energy"]),
        },
        "savings": {
            "latency": conv["latency"] - envm["latency"],
            "energy": conv["energy"] - envm["energy"],
        },
        "bytes": total,
        "calibrated": True,
    }
