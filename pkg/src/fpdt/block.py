"""One transformer block run the chunked, offloaded, sequence-parallel way.

Block structure (shared by the monolithic oracle and the pipelined path)::

    qkv = x @ Wqkv                      # per token, split into q | k | v heads
    a   = causal_attention(q, k, v)
    y   = x + a @ Wo
    z   = y + gelu(y @ W1) @ W2

No normalisation, no biases, no dropout. ``gelu`` is the tanh form used by
GPT-2. Hidden tensors are ``[b, s, h, d]`` with ``hidden = h * d``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import (SavedAttention, SparsityPlan, attention_reference,
                        attention_reference_backward, forward_chunk_step, iter_backward_chunked)
from .numeric import ChunkTensor, Layout, make_rng, matmul
from .layout import RankGroup, gather_heads, scatter_heads, send_matrix
from .store import OffloadStore, StoreError

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


@dataclass(frozen=True)
class BlockWeights:
    wqkv: np.ndarray   # [H, 3H]
    wo: np.ndarray     # [H, H]
    w1: np.ndarray     # [H, F]
    w2: np.ndarray     # [F, H]
    wvocab: np.ndarray | None = None  # [H, V]
    heads: int = 1

    def __post_init__(self) -> None:
        hid = self.wqkv.shape[0]
        f = self.w1.shape[1]
        ok = (self.wqkv.shape == (hid, 3 * hid) and self.wo.shape == (hid, hid)
              and self.w1.shape == (hid, f) and self.w2.shape == (f, hid)
              and hid % self.heads == 0)
        if self.wvocab is not None:
            ok = ok and self.wvocab.shape[0] == hid
        if not ok:
            raise ValueError("inconsistent block weight shapes")

    @property
    def hidden(self) -> int:
        return self.wqkv.shape[0]

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def random(cls, seed: int, heads: int, head_dim: int, ffn_dim: int | None = None,
               vocab: int | None = None, scale: float = 0.5) -> "BlockWeights":
        hid = heads * head_dim
        f = ffn_dim or 4 * hid
        rng = make_rng(seed)

        def mat(r, c):
            return rng.standard_normal((r, c)) * (scale / math.sqrt(r))

        wv = mat(hid, vocab) if vocab else None
        return cls(mat(hid, 3 * hid), mat(hid, hid), mat(hid, f), mat(f, hid), wv, heads)

    @classmethod
    def zeros(cls, heads: int, head_dim: int, ffn_dim: int) -> "BlockWeights":
        hid = heads * head_dim
        z = np.zeros
        return cls(z((hid, 3 * hid)), z((hid, hid)), z((hid, ffn_dim)), z((ffn_dim, hid)),
                   None, heads)

    def grads_like(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(getattr(self, n)) for n in ("wqkv", "wo", "w1", "w2")}


@dataclass(frozen=True)
class ChunkPlanExec:
    u_attn: int
    u_ffn: int
    u_loss: int = 1

    def __post_init__(self) -> None:
        if min(self.u_attn, self.u_ffn, self.u_loss) < 1:
            raise ValueError("chunk counts must be positive")

    @classmethod
    def default(cls, u_attn: int, vocab: int = 1, hidden: int = 1) -> "ChunkPlanExec":
        return cls(u_attn=u_attn, u_ffn=2 * u_attn, u_loss=2 * math.ceil(vocab / hidden))


class HbmLedger:
    """Counts live simulated-HBM bytes and remembers per-phase peaks."""

    def __init__(self):
        self.live: dict[str, int] = {}
        self.live_bytes = 0
        self.peak = 0
        self.phase_peaks: dict[str, int] = {}
        self._phase: str | None = None

    def alloc(self, tag: str, nbytes: int) -> None:
        if tag in self.live:
            raise KeyError(f"buffer {tag!r} already live")
        self.live[tag] = int(nbytes)
        self.live_bytes += int(nbytes)
        self.peak = max(self.peak, self.live_bytes)
        if self._phase is not None:
            self.phase_peaks[self._phase] = max(self.phase_peaks.get(self._phase, 0), self.live_bytes)

    def free(self, *tags: str) -> None:
        for tag in tags:
            self.live_bytes -= self.live.pop(tag)

    def free_prefix(self, prefix: str) -> None:
        self.free(*[t for t in self.live if t.startswith(prefix)])

    @contextlib.contextmanager
    def phase(self, name: str):
        prev, self._phase = self._phase, name
        self.phase_peaks[name] = max(self.phase_peaks.get(name, 0), self.live_bytes)
        try:
            yield self
        finally:
            self._phase = prev


def _flat(x: np.ndarray) -> np.ndarray:
    """``[b, s, h, d]`` -> ``[b, s, h*d]``."""
    b, s, h, d = x.shape
    return x.reshape(b, s, h * d)


def _tokens(x: np.ndarray) -> np.ndarray:
    """``[b, s, n]`` -> ``[b*s, n]`` for weight-gradient products."""
    return x.reshape(-1, x.shape[-1])


def _split_qkv(qkv: np.ndarray, heads: int, layout: Layout) -> list[ChunkTensor]:
    b, s, three_h = qkv.shape
    hid = three_h // 3
    return [ChunkTensor(qkv[..., i * hid:(i + 1) * hid].reshape(b, s, heads, hid // heads), layout)
            for i in range(3)]


def ffn(y: np.ndarray, w: BlockWeights) -> np.ndarray:
    return matmul(gelu(matmul(y, w.w1)), w.w2)


def block_reference_forward(hidden: ChunkTensor, w: BlockWeights) -> ChunkTensor:
    """Monolithic single-rank block over the full sequence."""
    if hidden.h * hidden.d != w.hidden or hidden.h != w.heads:
        raise ValueError(f"hidden {hidden.shape} does not match weights ({w.heads} heads, {w.hidden})")
    x = _flat(hidden.data)
    q, k, v = _split_qkv(matmul(x, w.wqkv), w.heads, Layout.SEQ_GLOBAL_HEADS_LOCAL)
    a = _flat(attention_reference(q, k, v).data)
    y = x + matmul(a, w.wo)
    z = y + ffn(y, w)
    return ChunkTensor(z.reshape(hidden.shape), hidden.layout)


def block_reference_backward(hidden: ChunkTensor, w: BlockWeights, d_out: ChunkTensor):
    """Analytic gradients of :func:`block_reference_forward`: ``(d_hidden, grads)``."""
    x = _flat(hidden.data)
    dz = _flat(d_out.data)
    qkv = matmul(x, w.wqkv)
    q, k, v = _split_qkv(qkv, w.heads, Layout.SEQ_GLOBAL_HEADS_LOCAL)
    a = _flat(attention_reference(q, k, v).data)
    y = x + matmul(a, w.wo)
    pre = matmul(y, w.w1)
    g = gelu(pre)
    grads = {}
    grads["w2"] = matmul(_tokens(g).T, _tokens(dz))
    dpre = matmul(dz, w.w2.T) * gelu_grad(pre)
    grads["w1"] = matmul(_tokens(y).T, _tokens(dpre))
    dy = dz + matmul(dpre, w.w1.T)
    grads["wo"] = matmul(_tokens(a).T, _tokens(dy))
    da = matmul(dy, w.wo.T)
    da_t = ChunkTensor(da.reshape(hidden.shape), Layout.SEQ_GLOBAL_HEADS_LOCAL)
    dq, dk, dv = attention_reference_backward(q, k, v, da_t)
    dqkv = np.concatenate([_flat(t.data) for t in (dq, dk, dv)], axis=-1)
    grads["wqkv"] = matmul(_tokens(x).T, _tokens(dqkv))
    dx = dy + matmul(dqkv, w.wqkv.T)
    return ChunkTensor(dx.reshape(hidden.shape), hidden.layout), grads


def chunked_ffn(hidden_chunks: Sequence[np.ndarray] | np.ndarray, w: BlockWeights, u_ffn: int,
                ledger: HbmLedger | None = None, tag: str = "ffn") -> list[np.ndarray]:
    """FFN (no residual) over ``u_ffn`` token chunks of ``[b, s, H]`` hidden states."""
    y = (np.concatenate(list(hidden_chunks), axis=1)
         if not isinstance(hidden_chunks, np.ndarray) else hidden_chunks)
    s = y.shape[1]
    if u_ffn < 1 or s % u_ffn:
        raise ValueError(f"u_ffn={u_ffn} does not divide {s} tokens")
    t = s // u_ffn
    out = []
    for i in range(u_ffn):
        yc = y[:, i * t:(i + 1) * t]
        pre = matmul(yc, w.w1)
        act = gelu(pre)
        oc = matmul(act, w.w2)
        if ledger is not None:
            ledger.alloc(f"{tag}.pre{i}", pre.nbytes)
            ledger.alloc(f"{tag}.act{i}", act.nbytes)
            ledger.alloc(f"{tag}.out{i}", oc.nbytes)
            ledger.free(f"{tag}.pre{i}", f"{tag}.act{i}", f"{tag}.out{i}")
        out.append(oc)
    return out


def _token_losses(h: np.ndarray, wvocab: np.ndarray, labels: np.ndarray):
    logits = matmul(h, wvocab)
    mx = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - mx)
    z = e.sum(axis=-1, keepdims=True)
    lse = (mx + np.log(z))[:, 0]
    losses = lse - logits[np.arange(len(labels)), labels]
    return losses, e / z, logits


def loss_reference(hidden: np.ndarray, wvocab: np.ndarray, labels: np.ndarray) -> float:
    """Mean token cross-entropy of ``hidden @ wvocab``; ``hidden`` is ``[n, H]``."""
    labels = np.asarray(labels)
    losses, _, _ = _token_losses(np.asarray(hidden, dtype=float), wvocab, labels)
    return math.fsum(losses.tolist()) / len(labels)


def chunked_loss_head(hidden_chunks: Sequence[np.ndarray] | np.ndarray, wvocab: np.ndarray,
                      labels: np.ndarray, u_loss: int, ledger: HbmLedger | None = None,
                      n_total: int | None = None):
    """Cross-entropy over ``u_loss`` token chunks; returns ``(mean loss, d_hidden [n, H])``.

    Only one ``[n/u_loss, vocab]`` logits buffer exists at a time. Token
    losses are summed with ``math.fsum`` so the result does not depend on
    token order or chunking. ``n_total`` sets the mean's denominator when the
    tokens are one rank's share of a longer sequence.
    """
    h = (np.concatenate([np.asarray(c) for c in hidden_chunks], axis=0)
         if not isinstance(hidden_chunks, np.ndarray) else hidden_chunks)
    h = h.reshape(-1, h.shape[-1])
    labels = np.asarray(labels).reshape(-1)
    vocab = wvocab.shape[1]
    if labels.shape[0] != h.shape[0]:
        raise ValueError("one label per token required")
    if labels.size and (labels.min() < 0 or labels.max() >= vocab):
        raise ValueError(f"label out of vocabulary range [0, {vocab})")
    n = h.shape[0]
    if u_loss < 1 or n % u_loss:
        raise ValueError(f"u_loss={u_loss} does not divide {n} tokens")
    denom = n_total or n
    t = n // u_loss
    losses: list[float] = []
    dh = np.empty_like(h)
    for i in range(u_loss):
        sl = slice(i * t, (i + 1) * t)
        tok_loss, probs, logits = _token_losses(h[sl], wvocab, labels[sl])
        if ledger is not None:
            ledger.alloc(f"loss.logits{i}", logits.nbytes)
            ledger.alloc(f"loss.probs{i}", probs.nbytes)
        losses.extend(tok_loss.tolist())
        probs[np.arange(t), labels[sl]] -= 1.0
        dh[sl] = matmul(probs / denom, wvocab.T)
        if ledger is not None:
            ledger.free(f"loss.logits{i}", f"loss.probs{i}")
    return math.fsum(losses) / denom, dh


def token_loss_sum(hidden: np.ndarray, wvocab: np.ndarray, labels: np.ndarray, u_loss: int) -> list[float]:
    """Per-token losses in chunk order; lets several ranks pool one exact sum."""
    h = hidden.reshape(-1, hidden.shape[-1])
    labels = np.asarray(labels).reshape(-1)
    t = h.shape[0] // u_loss
    out: list[float] = []
    for i in range(u_loss):
        sl = slice(i * t, (i + 1) * t)
        out.extend(_token_losses(h[sl], wvocab, labels[sl])[0].tolist())
    return out


@dataclass
class BlockSaved:
    """Handle to what the pipelined forward left in the per-rank stores."""

    layer: int
    p: int
    u: int
    plan: ChunkPlanExec
    attn: list[SavedAttention]
    x_shape: tuple[int, int, int, int]
    consumed: bool = False


@dataclass
class PipelineRun:
    outputs: list[ChunkTensor]
    saved: BlockSaved
    traces: list[list[tuple[str, int]]]
    ledgers: list[HbmLedger]
    send_volumes: list[np.ndarray] = field(default_factory=list)


def fpdt_block_forward(group: RankGroup, w: BlockWeights, plan: ChunkPlanExec,
                       stores: Sequence[OffloadStore], layer: int = 0,
                       sparsity: SparsityPlan | None = None,
                       double_buffer: bool = False) -> PipelineRun:
    """Pipelined forward over ``group.u`` slots; inputs must already be rank-ordinal shuffled.

    Per slot: project the local chunk, scatter heads with one Alltoall per
    q/k/v, run one online-attention step against cached key/value chunks,
    gather the output back and apply the output projection. The FFN then
    runs over ``plan.u_ffn`` local chunks. Everything backward needs goes
    into the rank's store.
    """
    p, u = group.p, group.u
    if plan.u_attn != u:
        raise ValueError(f"plan.u_attn={plan.u_attn} differs from the group's u={u}")
    if len(stores) != p:
        raise ValueError("one store per rank required")
    b, s_local, h, d = group.local[0].shape
    if h != w.heads or h * d != w.hidden:
        raise ValueError("rank-local tensors do not match the block weights")
    if s_local % plan.u_ffn:
        raise ValueError(f"u_ffn={plan.u_ffn} does not divide s_local={s_local}")
    c = s_local // u
    hl = h // p
    esz = group.local[0].data.itemsize
    H = w.hidden
    traces: list[list[tuple[str, int]]] = [[] for _ in range(p)]
    ledgers = [HbmLedger() for _ in range(p)]
    attn_saved = [SavedAttention(layer=layer, u=u, shape=(b, p * c, hl, d),
                                 plan=sparsity or SparsityPlan.dense(u),
                                 layout=Layout.SEQ_GLOBAL_HEADS_LOCAL) for _ in range(p)]
    volumes = []
    ys: list[list[np.ndarray]] = [[] for _ in range(p)]
    chunk_bytes = b * c * H * esz
    for r in range(p):
        ledgers[r].alloc("x", b * s_local * H * esz)

    for i in range(u):
        qkv_local = []
        for r in range(p):
            led = ledgers[r]
            with led.phase("attention"):
                x_i = _flat(group.slot(r, i).data)
                stores[r].offload((layer, i, "hidden"), x_i)
                led.alloc("qkv", 3 * chunk_bytes)
                qkv_local.append(_split_qkv(matmul(x_i, w.wqkv), h, Layout.SEQ_LOCAL_HEADS_GLOBAL))
                traces[r].append(("qkv_proj", i))
        recv = []
        for role in range(3):
            parts = [qkv_local[r][role] for r in range(p)]
            volumes.append(send_matrix(parts))
            recv.append(scatter_heads(parts))
        group.tick()
        outs = []
        for r in range(p):
            led = ledgers[r]
            with led.phase("attention"):
                led.alloc("recv", 3 * chunk_bytes)
                led.free("qkv")
                traces[r].append(("alltoall_scatter", i))
                # one fetched k/v pair, one score block and the online state
                led.alloc("kv_fetch", 2 * chunk_bytes)
                led.alloc("scores", b * hl * (p * c) ** 2 * esz)
                led.alloc("o_state", chunk_bytes)
                o = forward_chunk_step(i, recv[0][r], recv[1][r], recv[2][r], stores[r],
                                       attn_saved[r], double_buffer)
                led.free("kv_fetch", "scores", "recv")
                stores[r].offload((layer, i, "o"), o.data)
                traces[r].append(("attention", i))
                outs.append(o)
        gathered = gather_heads(outs)
        volumes.append(send_matrix(gathered))
        group.tick()
        for r in range(p):
            led = ledgers[r]
            with led.phase("attention"):
                led.alloc("o_local", chunk_bytes)
                led.free("o_state")
                a_i = _flat(gathered[r].data)
                x_i = _flat(group.slot(r, i).data)
                y_i = x_i + matmul(a_i, w.wo)
                led.alloc(f"y{i}", chunk_bytes)
                led.free("o_local")
                stores[r].offload((layer, i, "attn_out"), a_i)
                stores[r].offload((layer, i, "resid"), y_i)
                ys[r].append(y_i)
                traces[r].append(("alltoall_gather", i))
                traces[r].append(("out_proj", i))

    outputs = []
    for r in range(p):
        led = ledgers[r]
        y = np.concatenate(ys[r], axis=1)
        with led.phase("ffn"):
            f_out = chunked_ffn(y, w, plan.u_ffn, ledger=led)
        # residual add happens in place in the y buffer
        z = y + np.concatenate(f_out, axis=1)
        for n in range(plan.u_ffn):
            traces[r].append(("ffn", n))
        led.free_prefix("y")
        led.free("x")
        outputs.append(ChunkTensor(z.reshape(b, s_local, h, d), Layout.SEQ_LOCAL_HEADS_GLOBAL))
    saved = BlockSaved(layer=layer, p=p, u=u, plan=plan, attn=attn_saved,
                       x_shape=(b, s_local, h, d))
    return PipelineRun(outputs, saved, traces, ledgers, volumes)


@dataclass
class BackwardRun:
    d_hidden: list[ChunkTensor]
    grads: dict[str, np.ndarray]
    rank_grads: list[dict[str, np.ndarray]]
    traces: list[list[tuple[str, int]]]
    ledgers: list[HbmLedger]
    attn_traces: list = field(default_factory=list)


def fpdt_block_backward(saved: BlockSaved, d_out: Sequence[ChunkTensor], w: BlockWeights,
                        stores: Sequence[OffloadStore], double_buffer: bool = False) -> BackwardRun:
    """Pipelined backward; consumes and frees the saved chunks in ``stores``.

    FFN backward runs chunk-wise first, then the output projection per slot,
    then the nested key/value-outer, query-inner attention loop on every
    rank in lockstep. When outer iteration ``j`` ends, the gradients of
    global chunk ``j`` are final and go back through the Alltoall and the
    QKV projection backward straight away.
    """
    from .attention import BackwardTrace

    if saved.consumed:
        raise StoreError("saved block state was already consumed by a backward pass")
    p, u, layer = saved.p, saved.u, saved.layer
    if len(d_out) != p or len(stores) != p:
        raise ValueError("one upstream gradient and one store per rank required")
    b, s_local, h, d = saved.x_shape
    for g in d_out:
        if g.shape != saved.x_shape:
            raise ValueError(f"d_out shape {g.shape} differs from {saved.x_shape}")
    c = s_local // u
    H = w.hidden
    u_ffn = saved.plan.u_ffn
    esz = d_out[0].data.itemsize
    chunk_bytes = b * c * H * esz
    traces: list[list[tuple[str, int]]] = [[] for _ in range(p)]
    ledgers = [HbmLedger() for _ in range(p)]
    rank_grads = [w.grads_like() for _ in range(p)]
    da_slots: list[list[np.ndarray]] = []
    dx_slots: list[list[np.ndarray]] = []

    for r in range(p):
        led = ledgers[r]
        gr = rank_grads[r]
        st = stores[r]
        dz = _flat(d_out[r].data)
        led.alloc("dz", dz.nbytes)
        y = np.concatenate([st.fetch((layer, i, "resid")) for i in range(u)], axis=1)
        for i in range(u):
            st.release((layer, i, "resid"))
            st.free((layer, i, "resid"))
        led.alloc("y", y.nbytes)
        dy = np.empty_like(dz)
        t = s_local // u_ffn
        with led.phase("ffn"):
            for n in range(u_ffn):
                sl = slice(n * t, (n + 1) * t)
                pre = matmul(y[:, sl], w.w1)
                act = gelu(pre)
                led.alloc("ffn.pre", pre.nbytes)
                led.alloc("ffn.act", act.nbytes)
                gr["w2"] += matmul(_tokens(act).T, _tokens(dz[:, sl]))
                dpre = matmul(dz[:, sl], w.w2.T) * gelu_grad(pre)
                led.alloc("ffn.dpre", dpre.nbytes)
                gr["w1"] += matmul(_tokens(y[:, sl]).T, _tokens(dpre))
                dy[:, sl] = dz[:, sl] + matmul(dpre, w.w1.T)
                led.free("ffn.pre", "ffn.act", "ffn.dpre")
                traces[r].append(("ffn_bwd", n))
        led.free("y", "dz")
        led.alloc("dy", dy.nbytes)
        da_r, dx_r = [], []
        for i in range(u):
            a_i = st.fetch((layer, i, "attn_out"))
            st.release((layer, i, "attn_out"))
            st.free((layer, i, "attn_out"))
            dy_i = dy[:, i * c:(i + 1) * c]
            gr["wo"] += matmul(_tokens(a_i).T, _tokens(dy_i))
            da_r.append(matmul(dy_i, w.wo.T))
            dx_r.append(dy_i.copy())
            traces[r].append(("out_proj_bwd", i))
        da_slots.append(da_r)
        dx_slots.append(dx_r)

    # head-sharded upstream gradients for every global chunk
    do_chunks: list[list[ChunkTensor]] = [[] for _ in range(p)]
    for i in range(u):
        parts = [ChunkTensor(da_slots[r][i].reshape(b, c, h, d), Layout.SEQ_LOCAL_HEADS_GLOBAL)
                 for r in range(p)]
        for r, t_ in enumerate(scatter_heads(parts)):
            do_chunks[r].append(t_)
            traces[r].append(("alltoall_scatter_grad", i))
    o_chunks: list[list[ChunkTensor]] = []
    for r in range(p):
        os_ = []
        for i in range(u):
            os_.append(ChunkTensor(stores[r].fetch((layer, i, "o")), Layout.SEQ_GLOBAL_HEADS_LOCAL))
            stores[r].release((layer, i, "o"))
            stores[r].free((layer, i, "o"))
        o_chunks.append(os_)

    attn_traces = [BackwardTrace() for _ in range(p)]
    gens = [iter_backward_chunked(saved.attn[r], o_chunks[r], do_chunks[r], stores[r],
                                  double_buffer, attn_traces[r]) for r in range(p)]
    hl = h // p
    for steps in zip(*gens):
        js = {s_[0] for s_ in steps}
        if len(js) != 1:
            raise RuntimeError("ranks left lockstep in the attention backward")
        j = js.pop()
        for r in range(p):
            led = ledgers[r]
            with led.phase("attention"):
                led.alloc(f"dq_acc", b * hl * p * c * d * esz * (u - j))
                led.alloc("kv_fetch", 2 * chunk_bytes)
                led.alloc("q_fetch", 3 * chunk_bytes)
                led.alloc("scores", 2 * b * hl * (p * c) ** 2 * esz)
                led.alloc("dkv", 2 * chunk_bytes)
                led.free("kv_fetch", "q_fetch", "scores", "dq_acc")
            traces[r].append(("attention_bwd", j))
        grads_local = [gather_heads([s_[role] for s_ in steps]) for role in (1, 2, 3)]
        for r in range(p):
            led = ledgers[r]
            st = stores[r]
            with led.phase("attention"):
                dqkv = np.concatenate([_flat(grads_local[role][r].data) for role in range(3)],
                                      axis=-1)
                led.alloc("dqkv", dqkv.nbytes)
                x_j = st.fetch((layer, j, "hidden"))
                st.release((layer, j, "hidden"))
                st.free((layer, j, "hidden"))
                rank_grads[r]["wqkv"] += matmul(_tokens(x_j).T, _tokens(dqkv))
                dx_slots[r][j] = dx_slots[r][j] + matmul(dqkv, w.wqkv.T)
                led.free("dqkv", "dkv")
            traces[r].append(("alltoall_gather_grad", j))
            traces[r].append(("qkv_proj_bwd", j))

    d_hidden = []
    for r in range(p):
        ledgers[r].free("dy")
        dx = np.concatenate(dx_slots[r], axis=1)
        d_hidden.append(ChunkTensor(dx.reshape(b, s_local, h, d), Layout.SEQ_LOCAL_HEADS_GLOBAL))
    grads = w.grads_like()
    for name in grads:
        for r in range(p):
            grads[name] = grads[name] + rank_grads[r][name]
    saved.consumed = True
    return BackwardRun(d_hidden, grads, rank_grads, traces, ledgers, attn_traces)
