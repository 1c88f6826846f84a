import itertools

import numpy as np
import pytest

from fpdt.layout import (RankGroup, ShufflePerm, alltoall_gather_heads, alltoall_scatter_heads,
                         gather_heads, naive_seq, scatter_heads, send_matrix, shuffle_seq,
                         shuffle_tokens, slot_token_range, unshuffle_seq, unshuffle_tokens)
from fpdt.numeric import ChunkTensor, Layout, make_rng, random_tensor


def test_p1_identity_placement():
    ids = np.arange(16)
    per_rank, _ = shuffle_tokens(ids, ids, 1, 4)
    assert np.array_equal(per_rank[0], ids)


def test_slot_one_gathers_contiguous_chunks():
    p = u = 4
    ids = np.arange(16)  # one token per chunk: token g is chunk T_g
    shuffled, _ = shuffle_tokens(ids, ids, p, u)
    assert [int(shuffled[r][1]) for r in range(p)] == [4, 5, 6, 7]
    naive = naive_seq(ids, p, u)
    assert [int(naive[r][1]) for r in range(p)] == [1, 5, 9, 13]


@pytest.mark.parametrize("p,u", list(itertools.product((1, 2, 4), (1, 2, 4))))
def test_shuffle_round_trip(p, u):
    rng = make_rng(p * 10 + u)
    ids = rng.integers(0, 1000, 8 * p * u)
    labels = rng.integers(0, 1000, 8 * p * u)
    i2, l2 = unshuffle_tokens(*shuffle_tokens(ids, labels, p, u), u)
    assert np.array_equal(i2, ids) and np.array_equal(l2, labels)


def test_shuffle_divisibility():
    with pytest.raises(ValueError):
        shuffle_seq(np.arange(10), 4, 2)


def test_perm_is_bijection():
    perm = ShufflePerm(4, 3)
    places = {perm.place(g) for g in range(12)}
    assert len(places) == 12
    assert all(perm.global_index(*perm.place(g)) == g for g in range(12))
    assert perm.table()[2, 1] == 1 * 4 + 2


def test_scatter_p1_is_relabel():
    x = random_tensor(make_rng(0), (1, 4, 2, 3))
    out = scatter_heads([x])
    assert out[0].layout is Layout.SEQ_GLOBAL_HEADS_LOCAL
    assert np.array_equal(out[0].data, x.data)
    assert np.array_equal(gather_heads(out)[0].data, x.data)


def _sentinel(rank, tokens, heads):
    # value encodes (rank, local token, head)
    data = np.array([[[[rank * 100 + t * 10 + h] for h in range(heads)] for t in range(tokens)]],
                    dtype=float)
    return ChunkTensor(data)


def test_scatter_sentinel_index_formula():
    p, c, heads = 2, 2, 2  # s = 4 tokens over 2 ranks, u = 1
    parts = [_sentinel(r, c, heads) for r in range(p)]
    out = scatter_heads(parts)
    hl = heads // p
    for dst in range(p):
        assert out[dst].shape == (1, p * c, hl, 1)
        for src, t, hh in itertools.product(range(p), range(c), range(hl)):
            expect = src * 100 + t * 10 + (dst * hl + hh)
            assert out[dst].data[0, src * c + t, hh, 0] == expect
    back = gather_heads(out)
    for r in range(p):
        assert np.array_equal(back[r].data, parts[r].data)


def test_scatter_writes_fresh_buffers():
    parts = [random_tensor(make_rng(r), (1, 2, 4, 1)) for r in range(2)]
    out = scatter_heads(parts)
    assert all(not np.shares_memory(o.data, p.data) for o in out for p in parts)


def test_layout_mismatch_rejected():
    t = random_tensor(make_rng(0), (1, 2, 2, 1), Layout.SEQ_GLOBAL_HEADS_LOCAL)
    with pytest.raises(ValueError):
        scatter_heads([t, t])
    with pytest.raises(ValueError):
        gather_heads([t.with_layout(Layout.SEQ_LOCAL_HEADS_GLOBAL)])


def test_group_invariants():
    x = random_tensor(make_rng(0), (1, 16, 3, 2))
    with pytest.raises(ValueError):
        RankGroup.from_global(x, 2, 2)  # 3 heads over 2 ranks
    y = random_tensor(make_rng(0), (1, 12, 4, 2))
    with pytest.raises(ValueError):
        RankGroup.from_global(y, 2, 4)


def test_alltoall_round_trip_and_lockstep():
    p, u = 4, 2
    x = random_tensor(make_rng(9), (2, 32, 8, 3))
    g = RankGroup.from_global(x, p, u)
    for i in range(u):
        heads = alltoall_scatter_heads(g, i)
        back = alltoall_gather_heads(heads, g)
        for r in range(p):
            assert np.array_equal(back[r].data, g.slot(r, i).data)
        assert g.lockstep()
    assert np.array_equal(g.to_global().data, x.data)
    assert len(g.comm_log) == 2 * u


def test_send_matrix_balanced():
    p, u, s, h, b, d = 4, 2, 32, 8, 1, 2
    g = RankGroup.from_global(random_tensor(make_rng(0), (b, s, h, d)), p, u)
    m = send_matrix([g.slot(r, 0) for r in range(p)])
    off = m[~np.eye(p, dtype=bool)]
    assert np.all(off == s * h * b * d // (u * p * p))


def test_gathered_slot_range():
    x = np.arange(32, dtype=float).reshape(1, 32, 1, 1) * np.ones((1, 1, 2, 1))
    g = RankGroup.from_global(ChunkTensor(x), 2, 4)
    for i in range(4):
        out = alltoall_scatter_heads(g, i)[0]
        assert list(out.data[0, :, 0, 0].astype(int)) == list(slot_token_range(32, 4, i))
