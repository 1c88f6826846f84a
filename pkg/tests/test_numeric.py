import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, mpf, exp as mpexp

from fpdt.numeric import (ChunkTensor, Layout, PermuteSpec, concat_seq, identity_spec, make_rng,
                          matmul, naive_matmul, random_tensor, reshape_permute,
                          row_softmax_stable, split_seq)


def test_matmul_identity():
    m = make_rng(0).standard_normal((3, 5))
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_hand_case():
    assert matmul(np.array([[1, 2], [3, 4]]), np.array([[1], [1]])).tolist() == [[3.0], [7.0]]


def test_matmul_equals_triple_loop_bitwise():
    rng = make_rng(7)
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32))
def test_matmul_matches_oracle_any_shape(m, k, n, seed):
    rng = make_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_batched_and_deterministic():
    rng = make_rng(3)
    a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 5, 6))
    out = matmul(a, b)
    assert out.tobytes() == matmul(a, b).tobytes()
    assert np.array_equal(out[1, 2], naive_matmul(a[1, 2], b[1, 2]))


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(row_softmax_stable(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(row_softmax_stable(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])


def test_softmax_against_extended_precision():
    row = make_rng(11).standard_normal(9) * 5
    mp.dps = 50
    e = [mpexp(mpf(float(x))) for x in row]
    z = sum(e)
    oracle = np.array([float(v / z) for v in e])
    np.testing.assert_allclose(row_softmax_stable(row[None])[0], oracle, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(row, shift):
    x = np.array([row])
    p = row_softmax_stable(x)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.max(np.abs(row_softmax_stable(x + shift) - p)) <= 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        row_softmax_stable(np.array([[0.0, np.nan]]))


def test_rng_is_reproducible():
    a = make_rng(42).standard_normal(16)
    b = make_rng(42).standard_normal(16)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, make_rng(43).standard_normal(16))


def test_chunk_tensor_is_frozen_copy():
    src = np.zeros((1, 2, 1, 1))
    t = ChunkTensor(src)
    src[0, 0, 0, 0] = 5
    assert t.data[0, 0, 0, 0] == 0
    with pytest.raises(ValueError):
        t.data[0, 0, 0, 0] = 1
    with pytest.raises(ValueError):
        ChunkTensor(np.zeros((2, 2)))
    assert t.nbytes == 2 * 8


def test_identity_spec_bitwise():
    t = random_tensor(make_rng(0), (1, 4, 2, 3))
    assert reshape_permute(t, identity_spec(t.shape)).data.tobytes() == t.data.tobytes()


def test_permute_round_trip():
    t = random_tensor(make_rng(1), (2, 8, 4, 3))
    # split heads into (2, 2) and move the outer head block in front of the tokens
    spec = PermuteSpec(split=(2, 8, 2, 2, 3), perm=(2, 0, 1, 3, 4), out=(2, 2, 8, 2, 3),
                       src=(2, 8, 4, 3))
    moved = reshape_permute(t.data, spec)
    back = reshape_permute(moved, spec.inverse())
    assert np.array_equal(back, t.data)


def test_permute_count_mismatch():
    with pytest.raises(ValueError):
        PermuteSpec(split=(2, 3), perm=(1, 0), out=(7,))
    spec = PermuteSpec(split=(2, 3), perm=(1, 0), out=(3, 2))
    with pytest.raises(ValueError):
        reshape_permute(np.zeros(7), spec)


def test_split_and_concat_sequence():
    t = random_tensor(make_rng(2), (1, 16, 2, 2))
    parts = split_seq(t, 4)
    assert [p.shape for p in parts] == [(1, 4, 2, 2)] * 4
    for i, p in enumerate(parts):
        assert np.array_equal(p.data, t.data[:, 4 * i:4 * i + 4])
    assert np.array_equal(concat_seq(parts).data, t.data)
    with pytest.raises(ValueError):
        split_seq(t, 3)


def test_layout_tag_kept():
    t = random_tensor(make_rng(0), (1, 4, 2, 2), Layout.SEQ_GLOBAL_HEADS_LOCAL)
    assert split_seq(t, 2)[0].layout is Layout.SEQ_GLOBAL_HEADS_LOCAL
