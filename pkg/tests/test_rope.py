import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bandtok.errors import ConfigError, InvalidInputError
from bandtok.rope import RopeConfig, default_allocation, relative_score, rope_angles, rotate
from bandtok.verify import reference_rope_1d


def test_zero_position_is_identity(gen):
    v = gen.standard_normal(16)
    assert np.array_equal(rotate(v, (0, 0, 0), RopeConfig(16)), v)


def test_quarter_turn_by_hand():
    cfg = RopeConfig(2, (0, 2, 0), base_theta=123.0)
    out = rotate(np.array([1.0, 0.0]), (0, math.pi / 2, 0), cfg)
    assert np.allclose(out, [0.0, 1.0], atol=1e-15)


@given(st.integers(1, 32), st.integers(0, 2 ** 31 - 1))
def test_isometry(pairs, seed):
    g = np.random.default_rng(seed)
    cfg = RopeConfig(2 * pairs)
    v = g.standard_normal(2 * pairs)
    p = g.integers(0, 4096, size=3)
    assert abs(np.linalg.norm(rotate(v, p, cfg)) - np.linalg.norm(v)) < 1e-12


def test_equal_positions_give_dot_product(gen):
    q, k = gen.standard_normal(16), gen.standard_normal(16)
    assert abs(relative_score(q, k, (3, 5, 2), (3, 5, 2), RopeConfig(16)) - q @ k) < 1e-12


def test_shift_invariance_random(gen):
    for _ in range(100):
        hd = int(2 * gen.integers(1, 33))
        cfg = RopeConfig(hd)
        q, k = gen.standard_normal(hd), gen.standard_normal(hd)
        pq, pk, d = (gen.integers(0, 1000, size=3) for _ in range(3))
        assert abs(relative_score(q, k, pq + d, pk + d, cfg) - relative_score(q, k, pq, pk, cfg)) < 1e-10


def _pair_contributions(q, k, pq, pk, cfg):
    a, b = rotate(q, pq, cfg), rotate(k, pk, cfg)
    return (a * b).reshape(-1, 2).sum(1)


def test_band_shift_leaves_time_pairs_alone(gen):
    cfg = RopeConfig(32)
    axis_of, _ = cfg.pair_layout()
    q, k = gen.standard_normal(32), gen.standard_normal(32)
    base = _pair_contributions(q, k, (4, 7, 1), (2, 3, 5), cfg)
    moved = _pair_contributions(q, k, (4, 7, 9), (2, 3, 2), cfg)
    assert np.array_equal(base[axis_of != 2], moved[axis_of != 2])
    assert not np.allclose(base[axis_of == 2], moved[axis_of == 2])


def test_default_allocation():
    assert default_allocation(16) == (8, 4, 4)
    assert default_allocation(64) == (32, 16, 16)
    assert default_allocation(2) == (2, 0, 0)
    for hd in range(2, 130, 2):
        a = default_allocation(hd)
        assert sum(a) == hd and a[0] >= a[1] == a[2]


def test_interleaved_layout_round_robin():
    axis_of, rank_of = RopeConfig(16).pair_layout()
    assert axis_of.tolist() == [0, 1, 2, 0, 1, 2, 0, 0]
    assert rank_of.tolist() == [0, 0, 0, 1, 1, 1, 2, 3]


def test_interleaved_equals_block_with_permuted_features(gen):
    inter, block = RopeConfig(24, (12, 6, 6)), RopeConfig(24, (12, 6, 6), interleaved=False)
    ia, ir = inter.pair_layout()
    ba, br = block.pair_layout()
    # block pair index holding the same (axis, rank) as each interleaved pair
    where = {(a, r): i for i, (a, r) in enumerate(zip(ba.tolist(), br.tolist()))}
    perm_pairs = [where[(a, r)] for a, r in zip(ia.tolist(), ir.tolist())]
    perm = np.array([[2 * p, 2 * p + 1] for p in perm_pairs]).reshape(-1)
    for _ in range(20):
        q, k = gen.standard_normal(24), gen.standard_normal(24)
        pq, pk = gen.integers(0, 50, 3), gen.integers(0, 50, 3)
        qb, kb = np.empty(24), np.empty(24)
        qb[perm], kb[perm] = q, k
        assert abs(relative_score(q, k, pq, pk, inter) - relative_score(qb, kb, pq, pk, block)) < 1e-12


def test_one_d_mode_matches_reference_bitwise(gen):
    cfg = RopeConfig.one_d(16)
    x = gen.standard_normal((30, 16))
    pos = np.stack([np.arange(30), gen.integers(0, 9, 30), gen.integers(0, 9, 30)], 1)
    ang = rope_angles(pos, cfg)
    got = np.stack([rotate(x[i], pos[i], cfg) for i in range(30)])
    assert np.array_equal(got, reference_rope_1d(x, pos[:, 0]))
    assert np.array_equal(ang.shape, (30, 8))


def test_config_validation():
    for bad in (dict(head_dim=3), dict(head_dim=0), dict(head_dim=8, axis_allocation=(4, 2, 1)),
                dict(head_dim=8, axis_allocation=(4, 2, 4)), dict(head_dim=8, base_theta=0.0)):
        with pytest.raises(ConfigError):
            RopeConfig(**bad)
    with pytest.raises(InvalidInputError):
        rotate(np.zeros(6), (0, 0, 0), RopeConfig(8))
    with pytest.raises(InvalidInputError):
        rope_angles(np.zeros((3, 2)), RopeConfig(8))
