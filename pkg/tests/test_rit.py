import numpy as np
import pytest

from dsguard.errors import GeometryError, PlanFormatError
from dsguard.imageops import BlockStats, psnr, split_blocks, grid_stats
from dsguard.rit import (
    PairingPlan,
    RitParams,
    build_plan,
    dmean_code_range,
    invert_plan,
    pair_blocks,
    parse_plan,
    perm_index_bits,
    plan_serialized_size,
    serialize_plan,
    transform_block,
)

from corpus import clampfree_image, synth_image


def stats_with_sd(sd: int) -> BlockStats:
    return BlockStats(sums=(0,), count=16, sd_q=(sd * 256,))


def make_noisy_carrier(rng, img, budget=16):
    noise = rng.integers(-budget, budget + 1, img.shape)
    return np.clip(img.astype(np.int64) + noise, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- pairing

def test_pair_blocks_hand_example():
    clean = [stats_with_sd(s) for s in (1, 9, 3, 7)]
    carrier = [stats_with_sd(s) for s in (8, 2, 6, 4)]
    perm = pair_blocks(clean, carrier)
    # clean rank order (0,2,3,1) lands in carrier rank order (1,3,2,0)
    assert perm.tolist() == [1, 0, 3, 2]


def test_pair_blocks_equal_stats_identity():
    stats = [stats_with_sd(s) for s in (5, 1, 9, 3)]
    assert pair_blocks(stats, stats).tolist() == [0, 1, 2, 3]


def test_pair_blocks_single():
    assert pair_blocks([stats_with_sd(4)], [stats_with_sd(9)]).tolist() == [0]


def test_pair_blocks_length_mismatch():
    with pytest.raises(GeometryError):
        pair_blocks([stats_with_sd(1)], [stats_with_sd(1), stats_with_sd(2)])


def test_pair_blocks_deterministic_and_relabel_equivariant():
    rng = np.random.default_rng(21)
    sds = rng.permutation(64) + 1
    clean = [stats_with_sd(int(s)) for s in sds]
    carrier = [stats_with_sd(int(s)) for s in rng.permutation(64) + 1]
    p1 = pair_blocks(clean, carrier)
    p2 = pair_blocks(clean, carrier)
    assert np.array_equal(p1, p2)
    sigma = rng.permutation(64)
    relabeled = [clean[sigma[i]] for i in range(64)]
    p3 = pair_blocks(relabeled, carrier)
    inv = np.argsort(sigma)
    assert np.array_equal(p3, inv[p1])


def test_pair_blocks_is_bijection():
    rng = np.random.default_rng(22)
    clean = [stats_with_sd(int(s)) for s in rng.integers(0, 40, 64)]
    carrier = [stats_with_sd(int(s)) for s in rng.integers(0, 40, 64)]
    perm = pair_blocks(clean, carrier)
    assert sorted(perm.tolist()) == list(range(64))


# ------------------------------------------------------------- transform

def _oracle_transform(clean, carrier, step):
    """Independent enumeration of the four candidates + code computation."""
    n = clean.shape[0] * clean.shape[1]
    sums_c = clean.astype(np.int64).sum(axis=(0, 1))
    sums_t = carrier.astype(np.int64).sum(axis=(0, 1))

    def r(num, den):
        out = []
        for v in np.atleast_1d(num):
            sign = -1 if v < 0 else 1
            out.append(sign * ((2 * abs(int(v)) + den) // (2 * den)))
        return np.array(out)

    shift = r(sums_t - sums_c, n)
    best = None
    for k in range(4):
        cand = np.clip(
            np.rot90(clean.astype(np.int64), k, axes=(0, 1)) + shift, 0, 255
        )
        ssd = int(((cand - carrier.astype(np.int64)) ** 2).sum())
        if best is None or ssd < best[1]:
            best = (k, ssd, cand)
    lo, hi = max(-64, -(255 // step)), min(63, 255 // step)
    dq = np.clip(r(sums_c - sums_t, n * step), lo, hi)
    return best[2].astype(np.uint8), best[0], dq


def test_transform_identity_case():
    rng = np.random.default_rng(23)
    blk = rng.integers(40, 200, (4, 4, 3), dtype=np.uint8)
    out, k, dq = transform_block(blk, blk, 4)
    assert k == 0
    assert np.all(dq == 0)
    assert np.array_equal(out, blk)


def test_transform_constant_blocks():
    a = np.full((4, 4, 3), 37, dtype=np.uint8)
    b = np.full((4, 4, 3), 101, dtype=np.uint8)
    out, k, dq = transform_block(a, b, 4)
    assert np.all(out == 101)
    assert k == 0
    assert np.all(dq == round((37 - 101) / 4))


def test_transform_matches_four_way_oracle():
    rng = np.random.default_rng(24)
    for _ in range(300):
        clean = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
        carrier = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
        step = int(rng.choice([1, 2, 4, 8, 16]))
        out, k, dq = transform_block(clean, carrier, step)
        o_out, o_k, o_dq = _oracle_transform(clean, carrier, step)
        assert k == o_k
        assert np.array_equal(out, o_out)
        assert np.array_equal(np.asarray(dq), o_dq)


def test_transform_dmean_codes_in_range():
    lo, hi = dmean_code_range(4)
    assert (lo, hi) == (-63, 63)
    assert dmean_code_range(1) == (-64, 63)
    assert dmean_code_range(16) == (-15, 15)
    black = np.zeros((4, 4, 3), dtype=np.uint8)
    white = np.full((4, 4, 3), 255, dtype=np.uint8)
    _, _, dq = transform_block(white, black, 1)
    assert np.all(dq == 63)  # saturated, still representable


# ------------------------------------------------------------ build/invert

def test_build_plan_degenerate_carrier():
    img = synth_image(np.random.default_rng(25))
    core, plan = build_plan(img, img, RitParams())
    assert sorted(plan.permutation.tolist()) == list(range(64))
    assert psnr(core, img) > 45
    rec = invert_plan(core, plan)
    assert np.array_equal(rec, img)


def test_build_plan_mean_mimicry():
    rng = np.random.default_rng(26)
    clean = clampfree_image(rng)
    carrier = make_noisy_carrier(rng, clean)
    core, plan = build_plan(clean, carrier, RitParams())
    core_stats = grid_stats(split_blocks(core, 4))
    carrier_stats = grid_stats(split_blocks(carrier, 4))
    for cs, ts in zip(core_stats, carrier_stats):
        for ch in range(3):
            assert abs(cs.mean(ch) - ts.mean(ch)) <= 1.0


def test_build_plan_mimics_carrier_more_than_clean():
    rng = np.random.default_rng(27)
    gap = []
    for _ in range(100):
        clean, carrier = synth_image(rng), synth_image(rng)
        core, _ = build_plan(clean, carrier, RitParams())
        gap.append(psnr(core, carrier) - psnr(core, clean))
    assert np.mean(gap) > 0


def test_build_plan_shape_errors():
    a = np.zeros((32, 32, 3), dtype=np.uint8)
    with pytest.raises(GeometryError):
        build_plan(a, np.zeros((16, 16, 3), dtype=np.uint8), RitParams())
    with pytest.raises(GeometryError):
        build_plan(
            np.zeros((30, 30, 3), dtype=np.uint8),
            np.zeros((30, 30, 3), dtype=np.uint8),
            RitParams(),
        )


def test_invert_clampfree_step1_byte_exact():
    rng = np.random.default_rng(28)
    params = RitParams(quant_step=1)
    for _ in range(20):
        clean = clampfree_image(rng)
        carrier = make_noisy_carrier(rng, clean)
        core, plan = build_plan(clean, carrier, params)
        assert np.array_equal(invert_plan(core, plan), clean)


def test_invert_quantization_bound():
    rng = np.random.default_rng(29)
    for step in (1, 2, 4, 8, 16):
        params = RitParams(quant_step=step)
        clean = clampfree_image(rng)
        carrier = make_noisy_carrier(rng, clean)
        core, plan = build_plan(clean, carrier, params)
        rec = invert_plan(core, plan)
        err = np.abs(rec.astype(np.int64) - clean.astype(np.int64)).max()
        assert err <= -(-step // 2) + 1


def test_invert_recovery_quality_noisy_carriers():
    rng = np.random.default_rng(30)
    values = []
    for _ in range(10):
        clean = synth_image(rng)
        carrier = make_noisy_carrier(rng, clean)
        core, plan = build_plan(clean, carrier, RitParams())
        values.append(psnr(invert_plan(core, plan), clean))
    assert np.median(values) >= 40


def test_invert_geometry_mismatch():
    img = synth_image(np.random.default_rng(31))
    _, plan = build_plan(img, img, RitParams())
    with pytest.raises(GeometryError):
        invert_plan(np.zeros((16, 16, 3), dtype=np.uint8), plan)


def test_plan_rejects_non_bijective_permutation():
    img = synth_image(np.random.default_rng(32))
    _, plan = build_plan(img, img, RitParams())
    perm = plan.permutation.copy()
    perm[1] = perm[0]
    with pytest.raises(PlanFormatError, match="bijection"):
        PairingPlan(
            block_size=plan.block_size,
            rows=plan.rows,
            cols=plan.cols,
            channels=plan.channels,
            quant_step=plan.quant_step,
            permutation=perm,
            rotations=plan.rotations,
            dmean_q=plan.dmean_q,
        )


# ------------------------------------------------------------ serialization

def _random_plan(rng) -> PairingPlan:
    rows = int(rng.integers(1, 9))
    cols = int(rng.integers(1, 9))
    channels = int(rng.choice([1, 3]))
    step = int(rng.choice([1, 2, 4, 8, 16]))
    n = rows * cols
    lo, hi = dmean_code_range(step)
    return PairingPlan(
        block_size=int(rng.integers(2, 33)),
        rows=rows,
        cols=cols,
        channels=channels,
        quant_step=step,
        permutation=rng.permutation(n),
        rotations=rng.integers(0, 4, n),
        dmean_q=rng.integers(lo, hi + 1, (n, channels)),
    )


def test_serialized_size_64_block_example():
    img = synth_image(np.random.default_rng(33))
    _, plan = build_plan(img, img, RitParams())
    data = serialize_plan(plan)
    assert len(data) == 5 + -(-64 * (6 + 2 + 21) // 8) == 237
    assert plan_serialized_size(64, 3) == 237


def test_serialized_size_one_block():
    plan = PairingPlan(
        block_size=4,
        rows=1,
        cols=1,
        channels=3,
        quant_step=4,
        permutation=[0],
        rotations=[2],
        dmean_q=[[1, -2, 3]],
    )
    assert perm_index_bits(1) == 1
    data = serialize_plan(plan)
    assert len(data) == 5 + -(-(1 + 2 + 21) // 8) == 8
    parsed = parse_plan(data)
    assert parsed.rotations.tolist() == [2]
    assert parsed.dmean_q.tolist() == [[1, -2, 3]]


def test_serialize_parse_round_trip_random_plans():
    rng = np.random.default_rng(34)
    for _ in range(1000):
        plan = _random_plan(rng)
        parsed = parse_plan(serialize_plan(plan))
        assert parsed.block_size == plan.block_size
        assert parsed.rows == plan.rows
        assert parsed.cols == plan.cols
        assert parsed.channels == plan.channels
        assert parsed.quant_step == plan.quant_step
        assert np.array_equal(parsed.permutation, plan.permutation)
        assert np.array_equal(parsed.rotations, plan.rotations)
        assert np.array_equal(parsed.dmean_q, plan.dmean_q)


def test_parse_rejects_truncated():
    img = synth_image(np.random.default_rng(35))
    _, plan = build_plan(img, img, RitParams())
    data = serialize_plan(plan)
    for cut in (0, 3, 5, len(data) - 1):
        with pytest.raises(PlanFormatError):
            parse_plan(data[:cut])
    with pytest.raises(PlanFormatError):
        parse_plan(data + b"\0")


def test_parse_rejects_duplicate_permutation_index():
    plan = PairingPlan(
        block_size=4,
        rows=2,
        cols=2,
        channels=1,
        quant_step=4,
        permutation=[0, 1, 2, 3],
        rotations=[0, 0, 0, 0],
        dmean_q=[[0], [0], [0], [0]],
    )
    data = bytearray(serialize_plan(plan))
    # position 1's permutation field starts at bit 40 + (2 + 2 + 7) = 51;
    # overwrite it with position 0's value (0) to duplicate an index
    for bit in (51, 52):
        data[bit // 8] &= ~(1 << (bit % 8))
    with pytest.raises(PlanFormatError):
        parse_plan(bytes(data))


def test_parse_random_bytes_never_crash():
    rng = np.random.default_rng(36)
    for _ in range(500):
        blob = rng.integers(0, 256, int(rng.integers(0, 300)), dtype=np.uint8)
        try:
            parse_plan(blob.tobytes())
        except PlanFormatError:
            pass


def test_rit_params_validation():
    with pytest.raises(ValueError):
        RitParams(quant_step=3)
    with pytest.raises(ValueError):
        RitParams(quant_step=32)
    with pytest.raises(ValueError):
        RitParams(block_size=1)
