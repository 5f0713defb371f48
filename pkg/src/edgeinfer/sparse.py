"""Bitmask sparse encoding, evaluation-time magnitude pruning and footprints.

Binary layout of a serialized ``BitmaskTensor`` (all little-endian)::

    0   4s  magic b"BMSK"
    4   u16 version (1)
    6   u16 rank
    8   u8  exponent_bits
    9   i8  exponent_bias
    10  6x  reserved, zero
    16  u32 * rank  dims
    ..  mask bytes, ceil(N / 8), row-major, LSB-first within each byte
    ..  payload bytes, one 8-bit code per set mask bit
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import ZERO_CODE, FloatFormat, QuantTensor

MAGIC = b"BMSK"
VERSION = 1
_HEADER = struct.Struct("<4sHHBb6x")


class CorruptTensor(ValueError):
    pass


@dataclass(frozen=True)
class BitmaskTensor:
    shape: tuple[int, ...]
    mask: np.ndarray  # bool, flat, row-major
    payload: np.ndarray  # uint8 codes of the nonzero entries, in mask order
    format: FloatFormat

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        payload = np.asarray(self.payload, dtype=np.uint8).reshape(-1)
        for arr in (mask, payload):
            arr.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "payload", payload)
        if mask.size != math.prod(self.shape):
            raise CorruptTensor(f"mask has {mask.size} bits for shape {self.shape}")

    @property
    def size(self) -> int:
        return self.mask.size

    @property
    def nnz(self) -> int:
        return int(self.payload.size)

    @property
    def well_formed(self) -> bool:
        return int(self.mask.sum()) == self.payload.size

    def packed_mask(self) -> bytes:
        return np.packbits(self.mask, bitorder="little").tobytes()

    def row_offsets(self) -> np.ndarray:
        """Payload offset of the first element of each leading-axis row."""
        per_row = self.mask.reshape(self.shape[0], -1).sum(axis=1)
        return np.concatenate([[0], np.cumsum(per_row)]).astype(np.int64)

    def gather_rows(self, rows) -> QuantTensor:
        """Decode selected leading-axis rows without expanding the full tensor."""
        if not self.well_formed:
            raise CorruptTensor("popcount(mask) != payload length")
        rows = np.asarray(rows, dtype=np.int64)
        width = self.size // self.shape[0]
        offsets = self.row_offsets()
        mask2 = self.mask.reshape(self.shape[0], width)
        out = np.zeros((rows.size, width), dtype=np.uint8)
        for i, r in enumerate(rows):
            m = mask2[r]
            out[i, m] = self.payload[offsets[r] : offsets[r + 1]]
        return QuantTensor(out.reshape((rows.size,) + self.shape[1:]), self.format)


@dataclass(frozen=True)
class SparsityStats:
    total: int
    nonzero: int

    @property
    def density(self) -> float:
        return self.nonzero / self.total if self.total else 0.0


def encode_bitmask(x: QuantTensor) -> BitmaskTensor:
    flat = x.codes.reshape(-1)
    mask = flat != ZERO_CODE
    return BitmaskTensor(x.shape, mask, flat[mask], x.format)


def decode_bitmask(s: BitmaskTensor) -> QuantTensor:
    if not s.well_formed:
        raise CorruptTensor(
            f"popcount(mask)={int(s.mask.sum())} but payload has {s.payload.size} codes"
        )
    flat = np.zeros(s.size, dtype=np.uint8)
    flat[s.mask] = s.payload
    return QuantTensor(flat.reshape(s.shape), s.format)


def sparsity(s: BitmaskTensor) -> SparsityStats:
    return SparsityStats(s.size, int(s.mask.sum()))


def magnitude_prune(x, target_density: float) -> np.ndarray:
    """Zero the ``ceil((1 - d) * N)`` smallest-magnitude entries.

    Ties are broken by flat index: the lower index is zeroed first.
    """
    if not 0.0 < target_density <= 1.0:
        raise ValueError(f"target_density must be in (0, 1], got {target_density}")
    arr = np.array(x, dtype=np.float64)
    n = arr.size
    # guard against (1 - d) * N landing a hair above an integer
    k = math.ceil(round((1.0 - target_density) * n, 9))
    if k == 0:
        return arr
    order = np.argsort(np.abs(arr).reshape(-1), kind="stable")
    flat = arr.reshape(-1)
    flat[order[:k]] = 0.0
    return flat.reshape(arr.shape)


def storage_footprint(s: BitmaskTensor) -> dict[str, int]:
    payload = s.nnz
    mask = -(-s.size // 8)
    return {"payload_bytes": payload, "mask_bytes": mask, "total": payload + mask}


def to_bytes(s: BitmaskTensor) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, len(s.shape), s.format.exponent_bits, s.format.exponent_bias)
    dims = struct.pack(f"<{len(s.shape)}I", *s.shape)
    return header + dims + s.packed_mask() + s.payload.tobytes()


def from_bytes(data: bytes) -> BitmaskTensor:
    if len(data) < _HEADER.size:
        raise CorruptTensor("truncated header")
    magic, version, rank, e_bits, bias = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptTensor(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptTensor(f"unsupported version {version}")
    pos = _HEADER.size
    shape = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    n = math.prod(shape)
    n_mask = -(-n // 8)
    mask_bytes = np.frombuffer(data, dtype=np.uint8, count=n_mask, offset=pos)
    mask = np.unpackbits(mask_bytes, count=n, bitorder="little").astype(bool)
    pos += n_mask
    payload = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if payload.size != int(mask.sum()):
        raise CorruptTensor(f"payload has {payload.size} codes, mask has {int(mask.sum())} bits")
    return BitmaskTensor(shape, mask, payload.copy(), FloatFormat(e_bits, bias))
