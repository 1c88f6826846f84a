import math

import numpy as np
import pytest

from conftest import assert_close
from fpdt.block import (BlockWeights, ChunkPlanExec, HbmLedger, block_reference_backward,
                        block_reference_forward, chunked_ffn, chunked_loss_head, ffn,
                        fpdt_block_backward, fpdt_block_forward, gelu, gelu_grad, loss_reference)
from fpdt.layout import RankGroup, shuffle_seq, shuffle_tokens
from fpdt.memory import ModelShape, TrainConfig, activation_peak
from fpdt.numeric import ChunkTensor, make_rng, random_tensor
from fpdt.store import OffloadStore, StoreError
from fpdt.verify import ffn_chunks_for


def run_block(p, u, s, seed=0, heads=4, head_dim=2, u_ffn=None, d_out=None):
    w = BlockWeights.random(seed, heads, head_dim)
    x = random_tensor(make_rng(seed + 100), (1, s, heads, head_dim))
    group = RankGroup.from_global(x, p, u)
    stores = [OffloadStore() for _ in range(p)]
    plan = ChunkPlanExec(u, u_ffn or ffn_chunks_for(s // p, u))
    fwd = fpdt_block_forward(group, w, plan, stores)
    if d_out is None:
        d_out = random_tensor(make_rng(seed + 200), x.shape)
    bwd = fpdt_block_backward(fwd.saved, RankGroup.from_global(d_out, p, u).local, w, stores)
    return w, x, d_out, group, fwd, bwd, stores


def test_gelu_grad_matches_fd():
    x = np.linspace(-4, 4, 41)
    eps = 1e-6
    np.testing.assert_allclose(gelu_grad(x), (gelu(x + eps) - gelu(x - eps)) / (2 * eps), atol=1e-8)


def test_zero_weights_leave_residual():
    x = random_tensor(make_rng(1), (1, 8, 2, 2))
    out = block_reference_forward(x, BlockWeights.zeros(2, 2, 16))
    assert np.array_equal(out.data, x.data)


def test_tiny_reference_against_plain_numpy():
    # h=1, d=2, f=4, s=4 computed with textbook numpy operations
    w = BlockWeights.random(3, heads=1, head_dim=2, ffn_dim=4)
    x = random_tensor(make_rng(4), (1, 4, 1, 2))
    xs = x.data[0, :, 0, :]
    q, k, v = np.split(xs @ w.wqkv, 3, axis=-1)
    sc = q @ k.T / math.sqrt(2)
    sc[np.triu_indices(4, 1)] = -np.inf
    pr = np.exp(sc - sc.max(1, keepdims=True))
    pr /= pr.sum(1, keepdims=True)
    y = xs + (pr @ v) @ w.wo
    pre = y @ w.w1
    act = 0.5 * pre * (1 + np.tanh(math.sqrt(2 / math.pi) * (pre + 0.044715 * pre ** 3)))
    z = y + act @ w.w2
    np.testing.assert_allclose(block_reference_forward(x, w).data[0, :, 0, :], z, atol=1e-13)


def test_reference_deterministic():
    w = BlockWeights.random(5, 2, 2)
    x = random_tensor(make_rng(6), (1, 8, 2, 2))
    assert block_reference_forward(x, w).data.tobytes() == block_reference_forward(x, w).data.tobytes()


def test_p1_u1_exact():
    w, x, _, group, fwd, _, _ = run_block(1, 1, 16, u_ffn=1)
    assert np.array_equal(group.to_global(fwd.outputs).data, block_reference_forward(x, w).data)


@pytest.mark.parametrize("p,u,s", [(2, 4, 64), (4, 2, 32), (4, 4, 64), (1, 8, 32)])
def test_forward_backward_vs_reference(p, u, s):
    w, x, d_out, group, fwd, bwd, stores = run_block(p, u, s)
    assert_close(group.to_global(fwd.outputs), block_reference_forward(x, w), 1e-9)
    d_ref, g_ref = block_reference_backward(x, w, d_out)
    assert_close(group.to_global(bwd.d_hidden), d_ref, 1e-8)
    for name in g_ref:
        assert_close(bwd.grads[name], g_ref[name], 1e-8)
    assert all(len(st) == 0 for st in stores)


def test_rank_traces_in_lockstep():
    *_, fwd, bwd, _ = run_block(4, 4, 64)
    assert all(t == fwd.traces[0] for t in fwd.traces)
    assert all(t == bwd.traces[0] for t in bwd.traces)


def test_zero_upstream_zero_grads():
    *_, bwd, _ = run_block(2, 2, 32, d_out=ChunkTensor(np.zeros((1, 32, 4, 2))))
    assert all(not np.any(g) for g in bwd.grads.values())
    assert all(not np.any(t.data) for t in bwd.d_hidden)


def test_weight_grads_vs_finite_differences():
    p, u, s = 2, 4, 32
    w, x, d_out, _, _, bwd, _ = run_block(p, u, s, seed=7)
    rng = make_rng(8)
    eps = 1e-5
    names = ("wqkv", "wo", "w1", "w2")
    for n in range(10):
        name = names[n % 4]
        idx = tuple(int(rng.integers(0, m)) for m in getattr(w, name).shape)
        vals = []
        for sign in (1, -1):
            mats = {k: getattr(w, k).copy() for k in names}
            mats[name][idx] += sign * eps
            wp = BlockWeights(**mats, heads=w.heads)
            vals.append(float((block_reference_forward(x, wp).data * d_out.data).sum()))
        fd = (vals[0] - vals[1]) / (2 * eps)
        an = bwd.grads[name][idx]
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-6) < 1e-5


def test_backward_epochs_follow_loop_order():
    u = 4
    *_, bwd, _ = run_block(2, u, 32)
    for tr in bwd.attn_traces:
        assert tr.order == [(j, i) for j in range(u) for i in range(j, u)]
        assert all(tr.kv_write_epochs[j] == {j} for j in range(u))


def test_stale_saved_state_rejected():
    w, x, d_out, group, fwd, bwd, stores = run_block(2, 2, 16)
    with pytest.raises(StoreError):
        fpdt_block_backward(fwd.saved, bwd.d_hidden, w, stores)


def test_ffn_peak_below_attention_peak():
    for p, u, s in [(2, 2, 64), (2, 4, 64), (4, 2, 64)]:
        *_, fwd, bwd, _ = run_block(p, u, s, u_ffn=2 * u)
        for led in fwd.ledgers + bwd.ledgers:
            assert led.phase_peaks["ffn"] <= led.phase_peaks["attention"]


def test_chunked_ffn_bitwise_and_zero():
    w = BlockWeights.random(9, 2, 4)
    y = make_rng(10).standard_normal((1, 32, 8))
    one = np.concatenate(chunked_ffn(y, w, 1), axis=1)
    eight = np.concatenate(chunked_ffn(y, w, 8), axis=1)
    assert one.tobytes() == eight.tobytes()
    assert np.array_equal(one, ffn(y, w))
    assert not np.any(np.concatenate(chunked_ffn(np.zeros_like(y), w, 4), axis=1))
    with pytest.raises(ValueError):
        chunked_ffn(y, w, 3)


def test_loss_uniform_two_classes():
    loss, _ = chunked_loss_head(np.ones((4, 3)), np.zeros((3, 2)), np.array([0, 1, 1, 0]), 2)
    assert abs(loss - math.log(2)) < 1e-15


def test_loss_chunking_and_gradient():
    rng = make_rng(11)
    h = rng.standard_normal((32, 8))
    wv = rng.standard_normal((8, 20))
    labels = rng.integers(0, 20, 32)
    l1, d1 = chunked_loss_head(h, wv, labels, 1)
    l8, d8 = chunked_loss_head(h, wv, labels, 8)
    assert abs(l1 - l8) <= 1e-12
    assert abs(l1 - loss_reference(h, wv, labels)) <= 1e-10
    np.testing.assert_allclose(d1, d8, atol=1e-15)
    eps = 1e-6
    hp, hm = h.copy(), h.copy()
    hp[3, 2] += eps
    hm[3, 2] -= eps
    fd = (loss_reference(hp, wv, labels) - loss_reference(hm, wv, labels)) / (2 * eps)
    assert abs(fd - d1[3, 2]) < 1e-8


def test_loss_transient_bounded_by_chunk():
    rng = make_rng(12)
    n, vocab, u_loss = 64, 50, 8
    led = HbmLedger()
    chunked_loss_head(rng.standard_normal((n, 4)), rng.standard_normal((4, vocab)),
                      rng.integers(0, vocab, n), u_loss, ledger=led)
    assert max(led.peak, 0) <= 2 * (n // u_loss) * vocab * 8
    assert led.live_bytes == 0


def test_loss_rejects_bad_label():
    with pytest.raises(ValueError):
        chunked_loss_head(np.ones((2, 2)), np.ones((2, 3)), np.array([0, 3]), 1)


def test_loss_invariant_under_shuffle():
    rng = make_rng(13)
    p, u, n = 4, 2, 64
    h = rng.standard_normal((n, 8))
    wv = rng.standard_normal((8, 11))
    labels = rng.integers(0, 11, n)
    ref = loss_reference(h, wv, labels)
    hs = shuffle_seq(h, p, u)
    _, ls = shuffle_tokens(np.arange(n), labels, p, u)
    pooled = []
    from fpdt.block import token_loss_sum
    for r in range(p):
        pooled.extend(token_loss_sum(hs[r], wv, ls[r], 2))
    assert math.fsum(pooled) / n == ref


@pytest.mark.parametrize("p,u,s", [(p, u, s) for p in (1, 2, 4) for u in (1, 2, 4)
                                   for s in (32, 64) if s % (p * u) == 0])
def test_memory_model_matches_ledger_within_2x(p, u, s):
    # hidden >= s keeps the explicit score buffer, which the closed form omits, minor
    heads, head_dim = 4, 32
    *_, fwd, bwd, _ = run_block(p, u, s, heads=heads, head_dim=head_dim, u_ffn=2 * u if (s // p) % (2 * u) == 0 else u)
    ledger_peak = max(led.peak for led in fwd.ledgers + bwd.ledgers)
    model = ModelShape(1, heads * head_dim, heads, head_dim, 4 * heads * head_dim, 10)
    cfg = TrainConfig(model=model, s_global=s, p=p, u_attn=u, dtype_bytes=8, ac=True, oc=True,
                      offload=True)
    predicted = activation_peak(cfg).peak_activation_bytes
    assert 0.5 <= ledger_peak / predicted <= 2.0
