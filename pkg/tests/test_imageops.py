import math

import numpy as np
import pytest

from dsguard.errors import GeometryError
from dsguard.imageops import (
    PSNR_INFINITE,
    BlockGrid,
    as_image,
    assemble,
    block_stats,
    div_round_half_away,
    grid_stats,
    psnr,
    rotate_block,
    split_blocks,
)

from corpus import synth_image


def test_split_counts():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    grid = split_blocks(img, 4)
    assert (grid.rows, grid.cols, grid.n_blocks) == (8, 8, 64)


def test_split_single_block_is_image():
    img = np.arange(16, dtype=np.uint8).reshape(4, 4, 1)
    grid = split_blocks(img, 4)
    assert grid.n_blocks == 1
    assert np.array_equal(grid.blocks[0], img)


def test_split_assemble_round_trip_random():
    rng = np.random.default_rng(7)
    for _ in range(100):
        img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        assert np.array_equal(assemble(split_blocks(img, 4)), img)


def test_split_row_major_order():
    img = np.arange(64, dtype=np.uint8).reshape(8, 8, 1)
    grid = split_blocks(img, 4)
    # block 1 is the top-right tile
    assert np.array_equal(grid.blocks[1], img[0:4, 4:8])


def test_split_rejects_bad_dims():
    img = np.zeros((30, 32, 3), dtype=np.uint8)
    with pytest.raises(GeometryError, match="height 30"):
        split_blocks(img, 4)
    with pytest.raises(GeometryError, match="width 30"):
        split_blocks(np.zeros((32, 30, 3), dtype=np.uint8), 4)
    with pytest.raises(GeometryError):
        split_blocks(img, 1)


def test_assemble_then_split_identity_on_blocks():
    rng = np.random.default_rng(8)
    for _ in range(20):
        blocks = rng.integers(0, 256, (16, 4, 4, 3), dtype=np.uint8)
        grid = BlockGrid(4, 4, 4, blocks)
        again = split_blocks(assemble(grid), 4)
        assert np.array_equal(again.blocks, blocks)


def test_block_stats_constant():
    st = block_stats(np.full((4, 4, 3), 7, dtype=np.uint8))
    assert st.sums == (112, 112, 112)
    assert all(st.mean(ch) == 7 for ch in range(3))
    assert st.sd_q == (0, 0, 0)


def test_block_stats_balanced_extremes():
    blk = np.zeros((4, 4, 1), dtype=np.uint8)
    blk[::2, :, 0] = 0
    blk[1::2, :, 0] = 255
    st = block_stats(blk)
    assert st.mean(0) == 127.5
    assert abs(st.sd(0) - 127.5) <= 1 / 256


def test_block_stats_matches_float_reference():
    rng = np.random.default_rng(9)
    for _ in range(200):
        blk = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
        st = block_stats(blk)
        for ch in range(3):
            ref_mean = float(np.mean(blk[:, :, ch]))
            ref_sd = float(np.std(blk[:, :, ch]))
            assert st.mean(ch) == pytest.approx(ref_mean, abs=1e-12)
            assert abs(st.sd(ch) - ref_sd) <= 0.5 / 256 + 1e-12


def test_grid_stats_agree_with_block_stats():
    rng = np.random.default_rng(10)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    grid = split_blocks(img, 4)
    per_block = [block_stats(grid.blocks[i]) for i in range(grid.n_blocks)]
    assert grid_stats(grid) == per_block


def test_block_stats_translation_equivariant():
    rng = np.random.default_rng(11)
    for _ in range(50):
        blk = rng.integers(60, 170, (4, 4, 3), dtype=np.uint8)
        c = int(rng.integers(-50, 51))
        shifted = (blk.astype(np.int64) + c).astype(np.uint8)
        a, b = block_stats(blk), block_stats(shifted)
        assert all(
            b.sums[ch] == a.sums[ch] + c * a.count for ch in range(3)
        )
        assert a.sd_q == b.sd_q


def test_rotate_identity_and_involution():
    rng = np.random.default_rng(12)
    blk = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
    assert np.array_equal(rotate_block(blk, 0), blk)
    assert np.array_equal(rotate_block(rotate_block(blk, 2), 2), blk)


def test_rotate_four_times_is_identity():
    rng = np.random.default_rng(13)
    for _ in range(50):
        blk = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
        out = blk
        for _ in range(4):
            out = rotate_block(out, 1)
        assert np.array_equal(out, blk)


def test_rotate_group_action():
    rng = np.random.default_rng(14)
    blk = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    for i in range(4):
        for j in range(4):
            lhs = rotate_block(blk, (i + j) % 4)
            rhs = rotate_block(rotate_block(blk, i), j)
            assert np.array_equal(lhs, rhs)


def test_rotate_mod_four_and_square_check():
    blk = np.arange(16, dtype=np.uint8).reshape(4, 4, 1)
    assert np.array_equal(rotate_block(blk, 5), rotate_block(blk, 1))
    with pytest.raises(GeometryError):
        rotate_block(np.zeros((2, 4, 1), dtype=np.uint8), 1)


def test_psnr_identical_is_infinite():
    img = synth_image(np.random.default_rng(15))
    assert psnr(img, img) == PSNR_INFINITE
    assert math.isinf(PSNR_INFINITE)


def test_psnr_extreme_is_zero():
    a = np.zeros((8, 8, 3), dtype=np.uint8)
    b = np.full((8, 8, 3), 255, dtype=np.uint8)
    assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)


def test_psnr_matches_reference():
    rng = np.random.default_rng(16)
    for _ in range(50):
        a = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        b = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
        ref = 10.0 * math.log10(255.0**2 / mse)
        assert psnr(a, b) == pytest.approx(ref, abs=1e-6)


def test_psnr_symmetric_and_monotone():
    rng = np.random.default_rng(17)
    base = rng.integers(60, 200, (16, 16, 3), dtype=np.uint8)
    noise = rng.integers(-3, 4, base.shape)
    prev = math.inf
    for scale in (1, 2, 5, 10):
        other = np.clip(base.astype(np.int64) + scale * noise, 0, 255).astype(np.uint8)
        value = psnr(base, other)
        assert value == psnr(other, base)
        assert value < prev
        prev = value


def test_psnr_shape_mismatch():
    with pytest.raises(GeometryError):
        psnr(np.zeros((4, 4, 3), dtype=np.uint8), np.zeros((4, 8, 3), dtype=np.uint8))


def test_as_image_validation():
    with pytest.raises(GeometryError):
        as_image(np.zeros((4, 4, 2), dtype=np.uint8))
    with pytest.raises(GeometryError):
        as_image(np.zeros((4, 4, 3), dtype=np.float64))
    promoted = as_image(np.zeros((4, 4), dtype=np.uint8))
    assert promoted.shape == (4, 4, 1)


def test_div_round_half_away():
    assert div_round_half_away(3, 2) == 2
    assert div_round_half_away(-3, 2) == -2
    assert div_round_half_away(1, 3) == 0
    assert div_round_half_away(4, 2) == 2
    out = div_round_half_away(np.array([5, -5, 7, 0]), 2)
    assert out.tolist() == [3, -3, 4, 0]
