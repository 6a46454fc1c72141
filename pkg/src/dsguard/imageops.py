"""Raster primitives: block decomposition, block statistics, rotations, PSNR.

Images are numpy uint8 arrays of shape (height, width, channels) with
channels 1 or 3, row-major and channel-interleaved. Every function here is
pure; nothing mutates its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

PSNR_INFINITE = math.inf


def as_image(arr: np.ndarray) -> np.ndarray:
    """Validate and normalize an array to image form (H, W, C) uint8.

    A 2-D array is promoted to a single-channel image. Raises GeometryError
    for anything that is not an 8-bit raster with 1 or 3 channels.
    """
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, np.newaxis]
    if a.ndim != 3:
        raise GeometryError(f"expected (H, W, C) array, got shape {a.shape}")
    if a.shape[2] not in (1, 3):
        raise GeometryError(f"channels must be 1 or 3, got {a.shape[2]}")
    if a.dtype != np.uint8:
        if np.issubdtype(a.dtype, np.integer) and a.min() >= 0 and a.max() <= 255:
            a = a.astype(np.uint8)
        else:
            raise GeometryError(f"expected uint8 intensities, got dtype {a.dtype}")
    return np.ascontiguousarray(a)


def div_round_half_away(num, den: int):
    """Exact round-half-away-from-zero of the integer ratio num/den (den > 0).

    Works elementwise on integer arrays; stays in integer arithmetic so the
    result is bit-identical on every platform.
    """
    num = np.asarray(num, dtype=np.int64)
    sign = np.where(num < 0, -1, 1)
    out = sign * ((2 * np.abs(num) + den) // (2 * den))
    return out if out.ndim else int(out)


@dataclass(frozen=True)
class BlockGrid:
    """Non-overlapping square tiles of an image, row-major.

    blocks has shape (rows*cols, block_size, block_size, channels).
    """

    block_size: int
    rows: int
    cols: int
    blocks: np.ndarray

    @property
    def n_blocks(self) -> int:
        return self.rows * self.cols

    @property
    def channels(self) -> int:
        return int(self.blocks.shape[3])


@dataclass(frozen=True)
class BlockStats:
    """Exact per-channel block statistics.

    The mean is carried as (integer sum, pixel count) so it never suffers
    float drift; sd_q is the standard deviation in fixed point (units of
    1/sd_scale).
    """

    sums: tuple[int, ...]
    count: int
    sd_q: tuple[int, ...]
    sd_scale: int = 256

    def mean(self, channel: int) -> float:
        return self.sums[channel] / self.count

    def sd(self, channel: int) -> float:
        return self.sd_q[channel] / self.sd_scale


def split_blocks(image: np.ndarray, block_size: int) -> BlockGrid:
    """Split an image into a row-major grid of block_size×block_size tiles.

    block_size must be >= 2 and divide both dimensions; no padding is ever
    applied, so assemble() reproduces the input byte for byte.
    """
    img = as_image(image)
    if block_size < 2:
        raise GeometryError(f"block_size must be >= 2, got {block_size}")
    h, w, c = img.shape
    if h % block_size != 0:
        raise GeometryError(f"height {h} not divisible by block size {block_size}")
    if w % block_size != 0:
        raise GeometryError(f"width {w} not divisible by block size {block_size}")
    rows, cols = h // block_size, w // block_size
    blocks = (
        img.reshape(rows, block_size, cols, block_size, c)
        .swapaxes(1, 2)
        .reshape(rows * cols, block_size, block_size, c)
    )
    return BlockGrid(block_size, rows, cols, np.ascontiguousarray(blocks))


def assemble(grid: BlockGrid) -> np.ndarray:
    """Reassemble a BlockGrid into the image it came from (exact inverse)."""
    b, rows, cols = grid.block_size, grid.rows, grid.cols
    if grid.blocks.shape[0] != rows * cols:
        raise GeometryError(
            f"grid claims {rows}x{cols} blocks but holds {grid.blocks.shape[0]}"
        )
    c = grid.channels
    img = (
        grid.blocks.reshape(rows, cols, b, b, c)
        .swapaxes(1, 2)
        .reshape(rows * b, cols * b, c)
    )
    return np.ascontiguousarray(img)


def block_stats(block: np.ndarray, sd_scale: int = 256) -> BlockStats:
    """Per-channel stats of one tile: exact integer mean, fixed-point sd.

    Variance is computed from exact integer sums; only the final square root
    runs in floating point (IEEE sqrt is correctly rounded, so the fixed-point
    result is still platform-stable).
    """
    blk = np.asarray(block, dtype=np.int64)
    if blk.ndim == 2:
        blk = blk[:, :, np.newaxis]
    n = blk.shape[0] * blk.shape[1]
    sums = blk.sum(axis=(0, 1))
    sumsq = (blk * blk).sum(axis=(0, 1))
    # n^2 * var = n*sumsq - sums^2 (exact, non-negative)
    var_num = n * sumsq - sums * sums
    sd = np.sqrt(var_num.astype(np.float64)) / n
    sd_q = np.floor(sd * sd_scale + 0.5).astype(np.int64)
    return BlockStats(
        sums=tuple(int(s) for s in sums),
        count=int(n),
        sd_q=tuple(int(q) for q in sd_q),
        sd_scale=sd_scale,
    )


def grid_stats(grid: BlockGrid, sd_scale: int = 256) -> list[BlockStats]:
    """block_stats for every tile of a grid (vectorized over blocks)."""
    blk = grid.blocks.astype(np.int64)
    n = grid.block_size * grid.block_size
    sums = blk.sum(axis=(1, 2))
    sumsq = (blk * blk).sum(axis=(1, 2))
    var_num = n * sumsq - sums * sums
    sd = np.sqrt(var_num.astype(np.float64)) / n
    sd_q = np.floor(sd * sd_scale + 0.5).astype(np.int64)
    return [
        BlockStats(
            sums=tuple(int(s) for s in sums[i]),
            count=n,
            sd_q=tuple(int(q) for q in sd_q[i]),
            sd_scale=sd_scale,
        )
        for i in range(blk.shape[0])
    ]


def rotate_block(block: np.ndarray, k: int) -> np.ndarray:
    """Rotate a square tile by k counter-clockwise quarter turns (k mod 4)."""
    blk = np.asarray(block)
    if blk.shape[0] != blk.shape[1]:
        raise GeometryError(f"rotation needs a square tile, got {blk.shape[:2]}")
    return np.ascontiguousarray(np.rot90(blk, k % 4, axes=(0, 1)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; PSNR_INFINITE for identical images."""
    x = as_image(a)
    y = as_image(b)
    if x.shape != y.shape:
        raise GeometryError(f"shape mismatch: {x.shape} vs {y.shape}")
    diff = x.astype(np.float64) - y.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(255.0 * 255.0 / mse)
