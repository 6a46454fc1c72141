"""Reversible block transformation.

A clean image is disguised as a carrier image in three moves per block:
pair each clean block with a carrier position of matching texture rank,
rotate it to the best-fitting quarter turn, and shift its per-channel mean
onto the carrier block's mean. The side information (permutation, rotations,
quantized mean shifts) is the recipe that undoes everything; it serializes
to a compact bit-packed record that downstream code encrypts and embeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, PlanFormatError
from .imageops import (
    BlockGrid,
    BlockStats,
    as_image,
    assemble,
    div_round_half_away,
    grid_stats,
    split_blocks,
)

PLAN_HEADER_BYTES = 5
_ROTATION_BITS = 2
_DMEAN_BITS = 7


@dataclass(frozen=True)
class RitParams:
    """Knobs of the reversible transformation."""

    block_size: int = 4
    quant_step: int = 4
    sd_scale: int = 256

    def __post_init__(self):
        if self.block_size < 2:
            raise ValueError(f"block_size must be >= 2, got {self.block_size}")
        q = self.quant_step
        if q < 1 or q > 16 or (q & (q - 1)) != 0:
            raise ValueError(f"quant_step must be a power of two in [1, 16], got {q}")
        if self.sd_scale < 1:
            raise ValueError("sd_scale must be positive")


@dataclass
class PairingPlan:
    """Side information recorded by the forward transform.

    permutation[j] is the clean-block index that was placed at carrier
    position j; rotations[j] its counter-clockwise quarter turns; dmean_q[j]
    the per-channel mean-shift code (multiply by quant_step to get intensity
    units to add back on recovery).
    """

    block_size: int
    rows: int
    cols: int
    channels: int
    quant_step: int
    permutation: np.ndarray
    rotations: np.ndarray
    dmean_q: np.ndarray

    n_blocks: int = field(init=False)

    def __post_init__(self):
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        self.rotations = np.asarray(self.rotations, dtype=np.int64)
        self.dmean_q = np.asarray(self.dmean_q, dtype=np.int64)
        self.n_blocks = self.rows * self.cols
        self.validate()

    def validate(self) -> None:
        n = self.rows * self.cols
        if self.block_size < 2 or self.rows < 1 or self.cols < 1:
            raise PlanFormatError("bad plan geometry")
        if self.channels not in (1, 3):
            raise PlanFormatError(f"channels must be 1 or 3, got {self.channels}")
        q = self.quant_step
        if q < 1 or q > 16 or (q & (q - 1)) != 0:
            raise PlanFormatError(f"bad quant_step {q}")
        if self.permutation.shape != (n,):
            raise PlanFormatError("permutation length mismatch")
        if not np.array_equal(np.sort(self.permutation), np.arange(n)):
            raise PlanFormatError("permutation is not a bijection")
        if self.rotations.shape != (n,):
            raise PlanFormatError("rotations length mismatch")
        if self.rotations.min(initial=0) < 0 or self.rotations.max(initial=0) > 3:
            raise PlanFormatError("rotation outside {0..3}")
        if self.dmean_q.shape != (n, self.channels):
            raise PlanFormatError("dmean_q shape mismatch")
        if self.dmean_q.size and np.abs(self.dmean_q * q).max() > 255:
            raise PlanFormatError("mean-shift code exceeds intensity range")
        lo, hi = dmean_code_range(q)
        if self.dmean_q.size and (
            self.dmean_q.min() < lo or self.dmean_q.max() > hi
        ):
            raise PlanFormatError("mean-shift code outside representable range")


def dmean_code_range(quant_step: int) -> tuple[int, int]:
    """Valid mean-shift codes: 7-bit two's complement, |code*step| <= 255."""
    return max(-64, -(255 // quant_step)), min(63, 255 // quant_step)


def luminance_sd_key(stats: BlockStats) -> int:
    """Texture key used for pairing: fixed-point sd of a luminance proxy.

    Three channels combine as (R + 2G + B); one channel is used as-is. Only
    the ordering matters, so the /4 normalization is dropped.
    """
    if len(stats.sd_q) == 3:
        r, g, b = stats.sd_q
        return r + 2 * g + b
    return stats.sd_q[0]


def pair_blocks(
    clean_stats: list[BlockStats], carrier_stats: list[BlockStats]
) -> np.ndarray:
    """Rank-match blocks by texture: permutation p with p[j] = clean index
    whose sd rank equals carrier position j's sd rank.

    Deterministic: ties in the sd key break by block index.
    """
    if len(clean_stats) != len(carrier_stats):
        raise GeometryError(
            f"stats length mismatch: {len(clean_stats)} vs {len(carrier_stats)}"
        )
    n = len(clean_stats)
    clean_order = sorted(range(n), key=lambda i: (luminance_sd_key(clean_stats[i]), i))
    carrier_order = sorted(
        range(n), key=lambda j: (luminance_sd_key(carrier_stats[j]), j)
    )
    perm = np.empty(n, dtype=np.int64)
    for rank in range(n):
        perm[carrier_order[rank]] = clean_order[rank]
    return perm


def transform_block(
    clean_block: np.ndarray, carrier_block: np.ndarray, quant_step: int
) -> tuple[np.ndarray, int, np.ndarray]:
    """Disguise one clean block as one carrier block.

    Shifts the clean block's per-channel mean onto the carrier's (shift
    rounded half-away-from-zero to an integer, exact arithmetic), then picks
    the quarter turn minimizing squared distance to the carrier; ties go to
    the smaller k. Returns (protected block, k, dmean_q) where dmean_q is
    round((m_clean - m_carrier)/quant_step) clamped to the 7-bit code range.
    """
    clean = np.asarray(clean_block)
    carrier = np.asarray(carrier_block)
    if clean.shape != carrier.shape:
        raise GeometryError(f"tile shapes differ: {clean.shape} vs {carrier.shape}")
    n = clean.shape[0] * clean.shape[1]
    sums_c = clean.astype(np.int64).sum(axis=(0, 1))
    sums_t = carrier.astype(np.int64).sum(axis=(0, 1))
    shift = np.asarray(div_round_half_away(sums_t - sums_c, n), dtype=np.int64)

    carrier_i = carrier.astype(np.int64)
    best_k, best_ssd, best_block = 0, None, None
    for k in range(4):
        cand = np.rot90(clean.astype(np.int64), k, axes=(0, 1)) + shift
        np.clip(cand, 0, 255, out=cand)
        ssd = int(((cand - carrier_i) ** 2).sum())
        if best_ssd is None or ssd < best_ssd:
            best_k, best_ssd, best_block = k, ssd, cand
    lo, hi = dmean_code_range(quant_step)
    dmean_q = div_round_half_away(sums_c - sums_t, n * quant_step)
    dmean_q = np.clip(np.asarray(dmean_q, dtype=np.int64), lo, hi)
    return best_block.astype(np.uint8), best_k, dmean_q


def build_plan(
    clean: np.ndarray, carrier: np.ndarray, params: RitParams
) -> tuple[np.ndarray, PairingPlan]:
    """Forward transform: produce the carrier-mimicking core image + its plan."""
    clean_img = as_image(clean)
    carrier_img = as_image(carrier)
    if clean_img.shape != carrier_img.shape:
        raise GeometryError(
            f"clean/carrier shapes differ: {clean_img.shape} vs {carrier_img.shape}"
        )
    b = params.block_size
    clean_grid = split_blocks(clean_img, b)
    carrier_grid = split_blocks(carrier_img, b)
    perm = pair_blocks(
        grid_stats(clean_grid, params.sd_scale),
        grid_stats(carrier_grid, params.sd_scale),
    )
    n = clean_grid.n_blocks
    c = clean_grid.channels
    out_blocks = np.empty_like(carrier_grid.blocks)
    rotations = np.empty(n, dtype=np.int64)
    dmean_q = np.empty((n, c), dtype=np.int64)
    for j in range(n):
        blk, k, dq = transform_block(
            clean_grid.blocks[perm[j]], carrier_grid.blocks[j], params.quant_step
        )
        out_blocks[j] = blk
        rotations[j] = k
        dmean_q[j] = dq
    core = assemble(
        BlockGrid(b, carrier_grid.rows, carrier_grid.cols, out_blocks)
    )
    plan = PairingPlan(
        block_size=b,
        rows=carrier_grid.rows,
        cols=carrier_grid.cols,
        channels=c,
        quant_step=params.quant_step,
        permutation=perm,
        rotations=rotations,
        dmean_q=dmean_q,
    )
    return core, plan


def invert_plan(protected_core: np.ndarray, plan: PairingPlan) -> np.ndarray:
    """Undo the transform: un-shift, un-rotate, un-permute every block.

    On clamp-free forward passes the only residual error is the quantization
    of the mean shift (<= ceil(quant_step/2) + 1 per pixel, including the
    lost LSB plane when the core carried an embedded payload).
    """
    img = as_image(protected_core)
    plan.validate()
    b = plan.block_size
    if img.shape != (plan.rows * b, plan.cols * b, plan.channels):
        raise GeometryError(
            f"image shape {img.shape} does not match plan geometry "
            f"({plan.rows * b}, {plan.cols * b}, {plan.channels})"
        )
    grid = split_blocks(img, b)
    recovered = np.empty_like(grid.blocks)
    for j in range(grid.n_blocks):
        blk = np.rot90(grid.blocks[j].astype(np.int64), -int(plan.rotations[j]),
                       axes=(0, 1))
        blk = blk + plan.dmean_q[j] * plan.quant_step
        np.clip(blk, 0, 255, out=blk)
        recovered[plan.permutation[j]] = blk.astype(np.uint8)
    return assemble(BlockGrid(b, plan.rows, plan.cols, recovered))


class _BitWriter:
    """Little-endian bitstream: fields are written value-LSB-first, and bytes
    fill from bit 0 upward."""

    def __init__(self):
        self._bytes = bytearray()
        self._bitpos = 0

    def write(self, value: int, nbits: int) -> None:
        for i in range(nbits):
            if self._bitpos % 8 == 0:
                self._bytes.append(0)
            if (value >> i) & 1:
                self._bytes[-1] |= 1 << (self._bitpos % 8)
            self._bitpos += 1

    def getvalue(self) -> bytes:
        return bytes(self._bytes)


class _BitReader:
    def __init__(self, data: bytes):
        self._data = data
        self._bitpos = 0

    def read(self, nbits: int) -> int:
        value = 0
        for i in range(nbits):
            byte = self._bitpos // 8
            if byte >= len(self._data):
                raise PlanFormatError("truncated plan data")
            if (self._data[byte] >> (self._bitpos % 8)) & 1:
                value |= 1 << i
            self._bitpos += 1
        return value

    @property
    def bits_read(self) -> int:
        return self._bitpos


def perm_index_bits(n_blocks: int) -> int:
    """Bit width of one permutation index: ceil(log2(n)), at least 1."""
    return max(1, int(n_blocks - 1).bit_length())


def plan_serialized_size(n_blocks: int, channels: int) -> int:
    """Exact byte length of a serialized plan with the given geometry."""
    per_position = perm_index_bits(n_blocks) + _ROTATION_BITS + _DMEAN_BITS * channels
    return PLAN_HEADER_BYTES + (n_blocks * per_position + 7) // 8


def serialize_plan(plan: PairingPlan) -> bytes:
    """Freeze a plan to its wire form.

    Layout (little-endian bitstream): block_size:8, rows:8, cols:8,
    quant-step exponent:4, channels:2, reserved:10 (zero), then per carrier
    position: permutation index (ceil(log2(n)) bits, min 1), rotation:2,
    per-channel dmean code:7 (two's complement). Final byte zero-padded.
    """
    plan.validate()
    w = _BitWriter()
    w.write(plan.block_size, 8)
    w.write(plan.rows, 8)
    w.write(plan.cols, 8)
    w.write(plan.quant_step.bit_length() - 1, 4)
    w.write(plan.channels, 2)
    w.write(0, 10)
    pbits = perm_index_bits(plan.n_blocks)
    for j in range(plan.n_blocks):
        w.write(int(plan.permutation[j]), pbits)
        w.write(int(plan.rotations[j]), _ROTATION_BITS)
        for ch in range(plan.channels):
            w.write(int(plan.dmean_q[j, ch]) & 0x7F, _DMEAN_BITS)
    return w.getvalue()


def parse_plan(data: bytes) -> PairingPlan:
    """Parse wire-form plan bytes; rejects anything inconsistent, never crashes."""
    if len(data) < PLAN_HEADER_BYTES:
        raise PlanFormatError(f"plan too short: {len(data)} bytes")
    r = _BitReader(data)
    block_size = r.read(8)
    rows = r.read(8)
    cols = r.read(8)
    quant_exp = r.read(4)
    channels = r.read(2)
    reserved = r.read(10)
    if block_size < 2:
        raise PlanFormatError(f"bad block size {block_size}")
    if rows < 1 or cols < 1:
        raise PlanFormatError("empty block grid")
    if quant_exp > 4:
        raise PlanFormatError(f"bad quant-step exponent {quant_exp}")
    if channels not in (1, 3):
        raise PlanFormatError(f"bad channel count {channels}")
    if reserved != 0:
        raise PlanFormatError("reserved header bits set")
    n = rows * cols
    if len(data) != plan_serialized_size(n, channels):
        raise PlanFormatError(
            f"plan length {len(data)} != expected "
            f"{plan_serialized_size(n, channels)}"
        )
    quant_step = 1 << quant_exp
    pbits = perm_index_bits(n)
    perm = np.empty(n, dtype=np.int64)
    rotations = np.empty(n, dtype=np.int64)
    dmean_q = np.empty((n, channels), dtype=np.int64)
    for j in range(n):
        idx = r.read(pbits)
        if idx >= n:
            raise PlanFormatError(f"permutation index {idx} out of range")
        perm[j] = idx
        rotations[j] = r.read(_ROTATION_BITS)
        for ch in range(channels):
            raw = r.read(_DMEAN_BITS)
            dmean_q[j, ch] = raw - 128 if raw >= 64 else raw
    pad = -r.bits_read % 8
    if pad and r.read(pad) != 0:
        raise PlanFormatError("nonzero padding bits")
    lo, hi = dmean_code_range(quant_step)
    if n and (dmean_q.min() < lo or dmean_q.max() > hi):
        raise PlanFormatError("mean-shift code out of range")
    try:
        return PairingPlan(
            block_size=block_size,
            rows=rows,
            cols=cols,
            channels=channels,
            quant_step=quant_step,
            permutation=perm,
            rotations=rotations,
            dmean_q=dmean_q,
        )
    except PlanFormatError:
        raise
    except ValueError as exc:  # defensive: numpy conversion oddities
        raise PlanFormatError(str(exc)) from exc
