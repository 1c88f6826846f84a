"""Causal attention computed chunk by chunk with host-cached keys and values.

Tensors are ``[b, s, h, d]`` ChunkTensors; internally every kernel works on
``[b, h, s, d]`` views. Logits are scaled by ``1/sqrt(d)``.

Forward keeps an online-softmax state per query chunk (running row max ``m``,
running denominator ``l`` and an output already normalised by ``l``) and
streams the cached key/value chunks through it one at a time. Backward
recomputes each score block from the cached chunks and the saved ``(m, l)``
statistics, with the key/value chunk index as the outer loop and the query
chunk index as the inner loop.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .numeric import VERIFY_DTYPE, ChunkTensor, Layout, make_rng, matmul
from .store import OffloadStore, StoreError


class MaskKind(enum.Enum):
    FULL = "full"
    DIAGONAL = "diagonal"
    SKIP = "skip"


@dataclass(frozen=True)
class CausalChunkMask:
    q_chunk_index: int
    kv_chunk_index: int

    @property
    def kind(self) -> MaskKind:
        if self.kv_chunk_index < self.q_chunk_index:
            return MaskKind.FULL
        if self.kv_chunk_index == self.q_chunk_index:
            return MaskKind.DIAGONAL
        return MaskKind.SKIP

    def allowed(self, cq: int, ckv: int) -> np.ndarray:
        """Boolean ``[cq, ckv]`` matrix of permitted (query, key) pairs."""
        kind = self.kind
        if kind is MaskKind.FULL:
            return np.ones((cq, ckv), dtype=bool)
        if kind is MaskKind.SKIP:
            return np.zeros((cq, ckv), dtype=bool)
        if cq != ckv:
            raise ValueError("diagonal blocks must be square")
        return np.tril(np.ones((cq, cq), dtype=bool))


@dataclass(frozen=True)
class SparsityPlan:
    """Block keep-mask over ``(q_chunk, kv_chunk)`` pairs.

    ``rho`` is the fraction of off-diagonal causal blocks dropped; diagonal
    blocks are always kept so every query row sees at least itself.
    """

    keep: np.ndarray
    rho: float = 0.0

    def __post_init__(self) -> None:
        keep = np.array(self.keep, dtype=bool)
        u = keep.shape[0]
        if keep.shape != (u, u):
            raise ValueError("keep mask must be square")
        if not np.all(np.diag(keep)):
            raise ValueError("diagonal blocks must be kept")
        if np.any(np.triu(keep, 1)):
            raise ValueError("keep mask marks causally invalid blocks")
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @property
    def u(self) -> int:
        return self.keep.shape[0]

    @classmethod
    def dense(cls, u: int) -> "SparsityPlan":
        return cls(np.tril(np.ones((u, u), dtype=bool)), 0.0)

    @classmethod
    def block_diagonal(cls, u: int) -> "SparsityPlan":
        return cls(np.eye(u, dtype=bool), 1.0)

    @classmethod
    def random(cls, u: int, rho: float, seed: int) -> "SparsityPlan":
        if not 0.0 <= rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        pairs = [(i, j) for i in range(u) for j in range(i)]
        n_drop = int(round(rho * len(pairs)))
        order = make_rng(seed).permutation(len(pairs))
        keep = np.tril(np.ones((u, u), dtype=bool))
        for idx in order[:n_drop]:
            keep[pairs[idx]] = False
        return cls(keep, rho)

    def dropped_fraction(self) -> float:
        n_off = self.u * (self.u - 1) // 2
        if n_off == 0:
            return 0.0
        return float(n_off - (self.keep.sum() - self.u)) / n_off

    def token_mask(self, chunk_len: int) -> np.ndarray:
        """Expand to a ``[s, s]`` causal token mask."""
        blocks = np.kron(self.keep, np.ones((chunk_len, chunk_len), dtype=bool))
        s = self.u * chunk_len
        return blocks & np.tril(np.ones((s, s), dtype=bool))


def _bhsd(t: ChunkTensor | np.ndarray) -> np.ndarray:
    arr = t.data if isinstance(t, ChunkTensor) else np.asarray(t)
    return np.ascontiguousarray(arr.transpose(0, 2, 1, 3))


def _bshd(arr: np.ndarray, layout: Layout) -> ChunkTensor:
    return ChunkTensor(arr.transpose(0, 2, 1, 3), layout)


def _check_qkv(q: ChunkTensor, k: ChunkTensor, v: ChunkTensor) -> None:
    if q.b != k.b or q.h != k.h or q.d != k.d or k.shape != v.shape:
        raise ValueError(f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")


def reference_probs(q: ChunkTensor, k: ChunkTensor, causal: bool = True,
                    mask: np.ndarray | None = None) -> np.ndarray:
    """Full ``[b, h, s_q, s_kv]`` attention-weight matrix."""
    qh, kh = _bhsd(q), _bhsd(k)
    scores = matmul(qh, kh.swapaxes(-1, -2)) / np.sqrt(q.d)
    allowed = np.ones(scores.shape[-2:], dtype=bool)
    if causal:
        if q.s != k.s:
            raise ValueError("causal attention needs s_q == s_kv")
        allowed &= np.tril(np.ones((q.s, q.s), dtype=bool))
    if mask is not None:
        allowed &= mask
    scores = np.where(allowed, scores, -np.inf)
    rmax = scores.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(scores - rmax), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def attention_reference(q: ChunkTensor, k: ChunkTensor, v: ChunkTensor, causal: bool = True,
                        mask: np.ndarray | None = None) -> ChunkTensor:
    """Monolithic ``softmax(QK^T/sqrt(d) + mask) V``; materialises every score."""
    _check_qkv(q, k, v)
    probs = reference_probs(q, k, causal, mask)
    return _bshd(matmul(probs, _bhsd(v)), q.layout)


def attention_reference_backward(q: ChunkTensor, k: ChunkTensor, v: ChunkTensor,
                                 d_out: ChunkTensor, causal: bool = True,
                                 mask: np.ndarray | None = None):
    """Analytic gradients of the monolithic attention; returns ``(dq, dk, dv)``."""
    _check_qkv(q, k, v)
    probs = reference_probs(q, k, causal, mask)
    qh, kh, vh, doh = _bhsd(q), _bhsd(k), _bhsd(v), _bhsd(d_out)
    scale = 1.0 / np.sqrt(q.d)
    dv = matmul(probs.swapaxes(-1, -2), doh)
    dp = matmul(doh, vh.swapaxes(-1, -2))
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    dq = matmul(ds, kh) * scale
    dk = matmul(ds.swapaxes(-1, -2), qh) * scale
    return _bshd(dq, q.layout), _bshd(dk, k.layout), _bshd(dv, v.layout)


@dataclass
class OnlineState:
    """Running softmax statistics for one query chunk, ``[b, h, c]`` / ``[b, h, c, d]``."""

    m: np.ndarray
    l: np.ndarray
    o: np.ndarray
    blocks: int = 0

    @classmethod
    def empty(cls, b: int, h: int, c: int, d: int) -> "OnlineState":
        return cls(m=np.full((b, h, c), -np.inf), l=np.zeros((b, h, c)),
                   o=np.zeros((b, h, c, d), dtype=VERIFY_DTYPE))


def online_update(state: OnlineState, scores: np.ndarray, v_block: np.ndarray) -> OnlineState:
    """Fold one scaled, masked score block ``[b, h, c, ckv]`` into ``state``.

    Masked positions carry ``-inf``. ``v_block`` is ``[b, h, ckv, d]``.
    """
    if np.isnan(scores).any() or np.isposinf(scores).any():
        raise ValueError("non-finite scores")
    blk_max = scores.max(axis=-1)
    m_new = np.maximum(state.m, blk_max)
    if np.isneginf(m_new).any():
        raise ValueError("a query row has no admissible key so far")
    alpha = np.exp(state.m - m_new)
    p = np.exp(scores - m_new[..., None])
    l_new = state.l * alpha + p.sum(axis=-1)
    # normalise the weights before the product so a single block reproduces
    # the monolithic softmax(S) @ V bit for bit
    keep = (state.l * alpha / l_new)[..., None]
    o_new = state.o * keep + matmul(p / l_new[..., None], v_block)
    return OnlineState(m=m_new, l=l_new, o=o_new, blocks=state.blocks + 1)


def finalize(state: OnlineState) -> np.ndarray:
    if state.blocks == 0:
        raise ValueError("no key/value block processed")
    return state.o


def block_scores(q_blk: np.ndarray, k_blk: np.ndarray, mask: CausalChunkMask) -> np.ndarray:
    """Scaled, masked logits of one ``(q_chunk, kv_chunk)`` pair in ``[b, h, c, c]``."""
    d = q_blk.shape[-1]
    s = matmul(q_blk, k_blk.swapaxes(-1, -2)) / np.sqrt(d)
    if mask.kind is MaskKind.DIAGONAL:
        s = np.where(mask.allowed(s.shape[-2], s.shape[-1]), s, -np.inf)
    return s


@dataclass
class SavedAttention:
    """What backward needs from forward besides the store contents."""

    layer: int
    u: int
    shape: tuple[int, int, int, int]
    plan: SparsityPlan
    layout: Layout
    stats_done: set[int] = field(default_factory=set)


def _kv_order(m: int, plan: SparsityPlan) -> list[int]:
    return [j for j in range(m + 1) if plan.keep[m, j]]


def forward_chunk_step(m: int, q_m: ChunkTensor, k_m: ChunkTensor, v_m: ChunkTensor,
                       store: OffloadStore, saved: SavedAttention,
                       double_buffer: bool = False) -> ChunkTensor:
    """Process query chunk ``m`` against cached key/value chunks ``0..m``.

    ``k_m``/``v_m`` are cached first, then every kept chunk is fetched, folded
    into the online state and released before the next one is fetched (or,
    with ``double_buffer``, right after the next one is prefetched). ``q_m`` and
    the row statistics are cached after the output is final.
    """
    _check_qkv(q_m, k_m, v_m)
    for t in (q_m, k_m, v_m):
        if t.layout is not Layout.SEQ_GLOBAL_HEADS_LOCAL:
            raise ValueError("attention chunks must be in the head-sharded layout")
    if q_m.shape != saved.shape:
        raise ValueError(f"chunk shape {q_m.shape} differs from {saved.shape}")
    layer = saved.layer
    store.offload((layer, m, "k"), k_m.data)
    store.offload((layer, m, "v"), v_m.data)

    qh = _bhsd(q_m)
    state = OnlineState.empty(q_m.b, q_m.h, q_m.s, q_m.d)
    order = _kv_order(m, saved.plan)

    def fetch(j):
        return store.fetch((layer, j, "k")), store.fetch((layer, j, "v"))

    def release(j):
        store.release((layer, j, "k"))
        store.release((layer, j, "v"))

    pending = fetch(order[0])
    for n, j in enumerate(order):
        k_j, v_j = pending
        nxt = order[n + 1] if n + 1 < len(order) else None
        if double_buffer and nxt is not None:
            pending = fetch(nxt)
        scores = block_scores(qh, _bhsd(k_j), CausalChunkMask(m, j))
        state = online_update(state, scores, _bhsd(v_j))
        release(j)
        if not double_buffer and nxt is not None:
            pending = fetch(nxt)

    o_m = _bshd(finalize(state), q_m.layout)
    store.offload((layer, m, "q"), q_m.data)
    store.offload((layer, m, "stats"), np.stack([state.m, state.l]))
    saved.stats_done.add(m)
    return o_m


def forward_chunked(q_chunks: Sequence[ChunkTensor], k_chunks: Sequence[ChunkTensor],
                    v_chunks: Sequence[ChunkTensor], store: OffloadStore,
                    plan: SparsityPlan | None = None, layer: int = 0,
                    double_buffer: bool = False) -> tuple[list[ChunkTensor], SavedAttention]:
    u = len(q_chunks)
    if u < 1 or len(k_chunks) != u or len(v_chunks) != u:
        raise ValueError("need the same number (>= 1) of q, k and v chunks")
    plan = plan or SparsityPlan.dense(u)
    if plan.u != u:
        raise ValueError(f"sparsity plan is for {plan.u} chunks, got {u}")
    saved = SavedAttention(layer=layer, u=u, shape=q_chunks[0].shape, plan=plan,
                           layout=q_chunks[0].layout)
    outs = [forward_chunk_step(m, q_chunks[m], k_chunks[m], v_chunks[m], store, saved,
                               double_buffer)
            for m in range(u)]
    return outs, saved


@dataclass
class BackwardTrace:
    """Instrumentation of the nested backward loop."""

    order: list[tuple[int, int]] = field(default_factory=list)  # (outer kv j, inner q i)
    kv_write_epochs: dict[int, set[int]] = field(default_factory=dict)
    kv_final_epoch: dict[int, int] = field(default_factory=dict)
    dq_final_epoch: dict[int, int] = field(default_factory=dict)
    dq_last_write: dict[int, int] = field(default_factory=dict)


def iter_backward_chunked(saved: SavedAttention, o_chunks: Sequence[ChunkTensor],
                          d_out_chunks: Sequence[ChunkTensor], store: OffloadStore,
                          double_buffer: bool = False, trace: BackwardTrace | None = None,
                          free_after: bool = True) -> Iterator[tuple[int, ChunkTensor, ChunkTensor, ChunkTensor]]:
    """Yield ``(j, dq_j, dk_j, dv_j)`` as each outer key/value iteration ends.

    After outer iteration ``j`` the gradients of chunk ``j`` are final: ``dk_j``
    and ``dv_j`` only receive contributions inside it, and query chunk ``j``
    never attends past key chunk ``j``.
    """
    u, layer, plan = saved.u, saved.layer, saved.plan
    if len(o_chunks) != u or len(d_out_chunks) != u:
        raise ValueError("o / d_out chunk count differs from the forward")
    missing = set(range(u)) - saved.stats_done
    if missing:
        raise StoreError(f"missing saved statistics for chunks {sorted(missing)}")
    for o, g in zip(o_chunks, d_out_chunks):
        if o.shape != g.shape or o.shape != saved.shape:
            raise ValueError("d_out chunk shape differs from the output chunk shape")
    trace = trace if trace is not None else BackwardTrace()
    b, c, h, d = saved.shape
    scale = 1.0 / np.sqrt(d)
    dq = [np.zeros((b, h, c, d)) for _ in range(u)]
    # D_i = rowsum(dO_i * O_i), needs no recomputation
    delta = [(_bhsd(g) * _bhsd(o)).sum(axis=-1) for o, g in zip(o_chunks, d_out_chunks)]

    def fetch_q(i):
        return store.fetch((layer, i, "q")), store.fetch((layer, i, "stats"))

    def release_q(i):
        store.release((layer, i, "q"))
        store.release((layer, i, "stats"))

    for j in range(u):
        k_j = _bhsd(store.fetch((layer, j, "k")))
        v_j = _bhsd(store.fetch((layer, j, "v")))
        dk_j = np.zeros((b, h, c, d))
        dv_j = np.zeros((b, h, c, d))
        inner = [i for i in range(j, u) if plan.keep[i, j]]
        pending = fetch_q(inner[0])
        for n, i in enumerate(inner):
            q_i, stats = pending
            nxt = inner[n + 1] if n + 1 < len(inner) else None
            if double_buffer and nxt is not None:
                pending = fetch_q(nxt)
            q_i = _bhsd(q_i)
            lse = stats[0] + np.log(stats[1])
            s = block_scores(q_i, k_j, CausalChunkMask(i, j))
            p = np.exp(s - lse[..., None])
            do_i = _bhsd(d_out_chunks[i])
            dv_j += matmul(p.swapaxes(-1, -2), do_i)
            dp = matmul(do_i, v_j.swapaxes(-1, -2))
            ds = p * (dp - delta[i][..., None])
            dq[i] += matmul(ds, k_j) * scale
            dk_j += matmul(ds.swapaxes(-1, -2), q_i) * scale
            trace.order.append((j, i))
            trace.kv_write_epochs.setdefault(j, set()).add(j)
            trace.dq_last_write[i] = j
            release_q(i)
            if not double_buffer and nxt is not None:
                pending = fetch_q(nxt)
        store.release((layer, j, "k"))
        store.release((layer, j, "v"))
        trace.kv_final_epoch[j] = j
        trace.dq_final_epoch[j] = j
        if free_after:
            for role in ("q", "k", "v", "stats"):
                store.free((layer, j, role))
        yield (j, _bshd(dq[j], saved.layout), _bshd(dk_j, saved.layout),
               _bshd(dv_j, saved.layout))


def backward_chunked(saved: SavedAttention, o_chunks: Sequence[ChunkTensor],
                     d_out_chunks: Sequence[ChunkTensor], store: OffloadStore,
                     double_buffer: bool = False, trace: BackwardTrace | None = None):
    """Collect :func:`iter_backward_chunked` into ``(dq_chunks, dk_chunks, dv_chunks)``."""
    dqs, dks, dvs = [], [], []
    for _, dq_j, dk_j, dv_j in iter_backward_chunked(saved, o_chunks, d_out_chunks, store,
                                                     double_buffer, trace):
        dqs.append(dq_j)
        dks.append(dk_j)
        dvs.append(dv_j)
    return dqs, dks, dvs
