"""In-process sequence-parallel rank group and its Alltoall layout algebra.

A global sequence of ``p * u`` equal chunks is placed so that rank ``r`` slot
``i`` holds global chunk ``i * p + r`` (rank-ordinal placement). Gathering
slot ``i`` across ranks then yields a contiguous token range, so the plain
causal mask stays valid chunk by chunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numeric import ChunkTensor, Layout


@dataclass(frozen=True)
class ShufflePerm:
    p: int
    u: int

    def __post_init__(self) -> None:
        if self.p < 1 or self.u < 1:
            raise ValueError("p and u must be positive")

    @property
    def n_chunks(self) -> int:
        return self.p * self.u

    def place(self, g: int) -> tuple[int, int]:
        """Global chunk -> ``(rank, slot)``."""
        if not 0 <= g < self.n_chunks:
            raise IndexError(g)
        return g % self.p, g // self.p

    def global_index(self, rank: int, slot: int) -> int:
        return slot * self.p + rank

    def table(self) -> np.ndarray:
        """``[p, u]`` array of global chunk indices."""
        return np.arange(self.n_chunks).reshape(self.u, self.p).T.copy()


def _chunk_len(n: int, p: int, u: int) -> int:
    if p < 1 or u < 1:
        raise ValueError("p and u must be positive")
    if n % (p * u):
        raise ValueError(f"sequence length {n} is not divisible by p*u = {p * u}")
    return n // (p * u)


def shuffle_seq(x: np.ndarray, p: int, u: int, axis: int = 0) -> list[np.ndarray]:
    """Split ``x`` along ``axis`` into per-rank arrays in rank-ordinal placement."""
    x = np.asarray(x)
    c = _chunk_len(x.shape[axis], p, u)
    chunks = np.split(x, p * u, axis=axis)
    perm = ShufflePerm(p, u)
    return [np.concatenate([chunks[perm.global_index(r, i)] for i in range(u)], axis=axis)
            if c else np.take(x, [], axis=axis) for r in range(p)]


def unshuffle_seq(per_rank: Sequence[np.ndarray], u: int, axis: int = 0) -> np.ndarray:
    p = len(per_rank)
    perm = ShufflePerm(p, u)
    slots = [np.split(np.asarray(a), u, axis=axis) for a in per_rank]
    chunks = [slots[r][i] for r, i in (perm.place(g) for g in range(p * u))]
    return np.concatenate(chunks, axis=axis)


def naive_seq(x: np.ndarray, p: int, u: int, axis: int = 0) -> list[np.ndarray]:
    """Contiguous split: rank ``r`` slot ``i`` holds global chunk ``r * u + i``."""
    _chunk_len(np.asarray(x).shape[axis], p, u)
    return list(np.split(np.asarray(x), p, axis=axis))


def shuffle_tokens(token_ids: Sequence[int], labels: Sequence[int], p: int, u: int):
    """Data-loader side reordering of ids and labels; returns ``(ids_per_rank, labels_per_rank)``."""
    ids = np.asarray(token_ids)
    lab = np.asarray(labels)
    if ids.shape != lab.shape:
        raise ValueError("token ids and labels must have the same length")
    return shuffle_seq(ids, p, u), shuffle_seq(lab, p, u)


def unshuffle_tokens(ids_per_rank: Sequence[np.ndarray], labels_per_rank: Sequence[np.ndarray],
                     u: int):
    return unshuffle_seq(ids_per_rank, u), unshuffle_seq(labels_per_rank, u)


@dataclass
class RankGroup:
    """``p`` simulated ranks, each holding a ``[b, s_local, h_global, d]`` tensor."""

    p: int
    u: int
    local: list[ChunkTensor]
    step_counters: list[int] = field(default_factory=list)
    comm_log: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.local) != self.p:
            raise ValueError(f"expected {self.p} local tensors, got {len(self.local)}")
        shapes = {t.shape for t in self.local}
        if len(shapes) != 1:
            raise ValueError(f"ranks hold differently shaped tensors: {shapes}")
        b, s_local, h, d = self.local[0].shape
        if h % self.p:
            raise ValueError(f"h_global={h} not divisible by p={self.p}")
        if s_local % self.u:
            raise ValueError(f"s_local={s_local} not divisible by u={self.u}")
        for t in self.local:
            if t.layout is not Layout.SEQ_LOCAL_HEADS_GLOBAL:
                raise ValueError("rank-local tensors must be in the token-sharded layout")
        if not self.step_counters:
            self.step_counters = [0] * self.p

    @property
    def perm(self) -> ShufflePerm:
        return ShufflePerm(self.p, self.u)

    @property
    def s_global(self) -> int:
        return self.local[0].s * self.p

    @classmethod
    def from_global(cls, x: ChunkTensor, p: int, u: int) -> "RankGroup":
        """Shuffle a global ``[b, s, h, d]`` tensor onto ``p`` ranks."""
        parts = shuffle_seq(x.data, p, u, axis=1)
        return cls(p, u, [ChunkTensor(a, Layout.SEQ_LOCAL_HEADS_GLOBAL) for a in parts])

    def to_global(self, per_rank: Sequence[ChunkTensor] | None = None) -> ChunkTensor:
        per_rank = self.local if per_rank is None else per_rank
        return ChunkTensor(unshuffle_seq([t.data for t in per_rank], self.u, axis=1),
                           Layout.SEQ_LOCAL_HEADS_GLOBAL)

    def slot(self, rank: int, i: int) -> ChunkTensor:
        t = self.local[rank]
        c = t.s // self.u
        return ChunkTensor(t.data[:, i * c:(i + 1) * c], t.layout)

    def tick(self) -> None:
        self.step_counters = [n + 1 for n in self.step_counters]

    def lockstep(self) -> bool:
        return len(set(self.step_counters)) == 1


def send_matrix(per_rank: Sequence[ChunkTensor]) -> np.ndarray:
    """Element counts ``[src, dst]`` moved by a head-scatter of ``per_rank``."""
    p = len(per_rank)
    b, c, h, d = per_rank[0].shape
    m = np.full((p, p), b * c * (h // p) * d, dtype=np.int64)
    np.fill_diagonal(m, 0)
    return m


def scatter_heads(per_rank: Sequence[ChunkTensor]) -> list[ChunkTensor]:
    """Token-sharded slot tensors ``[b, c, H, d]`` -> head-sharded ``[b, p*c, H/p, d]``.

    Rank ``r`` receives head block ``r`` from every source, concatenated in
    source-rank order along the token axis, into a fresh buffer.
    """
    p = len(per_rank)
    if p < 1:
        raise ValueError("empty rank list")
    shapes = {t.shape for t in per_rank}
    if len(shapes) != 1:
        raise ValueError(f"ranks hold differently shaped slot tensors: {shapes}")
    for t in per_rank:
        if t.layout is not Layout.SEQ_LOCAL_HEADS_GLOBAL:
            raise ValueError("scatter expects the token-sharded layout")
    b, c, h, d = per_rank[0].shape
    if h % p:
        raise ValueError(f"h_global={h} not divisible by p={p}")
    hl = h // p
    out = []
    for dst in range(p):
        buf = np.empty((b, p * c, hl, d), dtype=per_rank[0].data.dtype)
        for src in range(p):
            buf[:, src * c:(src + 1) * c] = per_rank[src].data[:, :, dst * hl:(dst + 1) * hl]
        out.append(ChunkTensor(buf, Layout.SEQ_GLOBAL_HEADS_LOCAL))
    return out


def gather_heads(per_rank: Sequence[ChunkTensor]) -> list[ChunkTensor]:
    """Exact inverse of :func:`scatter_heads`."""
    p = len(per_rank)
    if p < 1:
        raise ValueError("empty rank list")
    shapes = {t.shape for t in per_rank}
    if len(shapes) != 1:
        raise ValueError(f"ranks hold differently shaped tensors: {shapes}")
    for t in per_rank:
        if t.layout is not Layout.SEQ_GLOBAL_HEADS_LOCAL:
            raise ValueError("gather expects the head-sharded layout")
    b, s, hl, d = per_rank[0].shape
    if s % p:
        raise ValueError(f"gathered token count {s} not divisible by p={p}")
    c = s // p
    out = []
    for dst in range(p):
        buf = np.empty((b, c, hl * p, d), dtype=per_rank[0].data.dtype)
        for src in range(p):
            buf[:, :, src * hl:(src + 1) * hl] = per_rank[src].data[:, dst * c:(dst + 1) * c]
        out.append(ChunkTensor(buf, Layout.SEQ_LOCAL_HEADS_GLOBAL))
    return out


def alltoall_scatter_heads(group: RankGroup, slot: int) -> list[ChunkTensor]:
    if not 0 <= slot < group.u:
        raise IndexError(slot)
    parts = [group.slot(r, slot) for r in range(group.p)]
    group.comm_log.append(send_matrix(parts))
    group.tick()
    return scatter_heads(parts)


def alltoall_gather_heads(per_rank: Sequence[ChunkTensor],
                          group: RankGroup | None = None) -> list[ChunkTensor]:
    out = gather_heads(per_rank)
    if group is not None:
        group.comm_log.append(send_matrix(out))
        group.tick()
    return out


def slot_token_range(s_global: int, u: int, slot: int) -> range:
    """Global token indices covered by a gathered slot under rank-ordinal placement."""
    n = s_global // u
    return range(slot * n, (slot + 1) * n)
