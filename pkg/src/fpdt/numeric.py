"""Deterministic dense arithmetic shared by the functional modules.

All verification runs in float64. ``matmul`` accumulates over the inner
dimension one index at a time, in increasing order, so its result is bitwise
reproducible and bitwise equal to a naive triple loop.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VERIFY_DTYPE = np.float64


class Layout(enum.Enum):
    """Which of the sequence / head axes a rank holds only a slice of."""

    SEQ_LOCAL_HEADS_GLOBAL = "seq_local_heads_global"
    SEQ_GLOBAL_HEADS_LOCAL = "seq_global_heads_local"


@dataclass(frozen=True)
class ChunkTensor:
    """A ``[b, s, h, d]`` float array tagged with its sharding layout.

    The payload is copied on construction and marked read-only.
    """

    data: np.ndarray
    layout: Layout = Layout.SEQ_LOCAL_HEADS_GLOBAL

    def __post_init__(self) -> None:
        arr = np.array(self.data, copy=True)
        if arr.ndim != 4:
            raise ValueError(f"ChunkTensor needs 4 axes [b, s, h, d], got shape {arr.shape}")
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(VERIFY_DTYPE)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def b(self) -> int:
        return self.data.shape[0]

    @property
    def s(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def d(self) -> int:
        return self.data.shape[3]

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def with_layout(self, layout: Layout) -> "ChunkTensor":
        return ChunkTensor(self.data, layout)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())


def make_rng(seed: int) -> np.random.Generator:
    """Philox-4x64 counter-based generator; identical streams on every platform."""
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    return np.random.Generator(np.random.Philox(seed))


def random_tensor(rng: np.random.Generator, shape: Sequence[int],
                  layout: Layout = Layout.SEQ_LOCAL_HEADS_GLOBAL) -> ChunkTensor:
    return ChunkTensor(rng.standard_normal(tuple(shape)), layout)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched product ``a[..., m, k] @ b[..., k, n]`` with a fixed k-inner order.

    Every output element is ``((0 + a0*b0) + a1*b1) + ...``, exactly what a
    naive triple loop produces. Leading batch axes broadcast.
    """
    a = np.asarray(a, dtype=VERIFY_DTYPE)
    b = np.asarray(b, dtype=VERIFY_DTYPE)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]), dtype=VERIFY_DTYPE)
    for k in range(a.shape[-1]):
        out += a[..., :, k, None] * b[..., None, k, :]
    return out


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Scalar triple loop; only used as a test oracle for 2-D operands."""
    m, kk = a.shape
    k2, n = b.shape
    if kk != k2:
        raise ValueError("inner dimensions differ")
    out = np.zeros((m, n), dtype=VERIFY_DTYPE)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(kk):
                acc += float(a[i, k]) * float(b[k, j])
            out[i, j] = acc
    return out


def row_softmax_stable(m: np.ndarray) -> np.ndarray:
    """Softmax over the last axis after subtracting the row max."""
    m = np.asarray(m, dtype=VERIFY_DTYPE)
    if not np.isfinite(m).all():
        raise ValueError("row_softmax_stable requires finite input")
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class PermuteSpec:
    """Reshape to ``split``, transpose by ``perm``, reshape to ``out``.

    Any ``-1`` entry is not supported; shapes are explicit so the inverse is
    unambiguous.
    """

    split: tuple[int, ...]
    perm: tuple[int, ...]
    out: tuple[int, ...]
    src: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if sorted(self.perm) != list(range(len(self.split))):
            raise ValueError("perm must be a permutation of the split axes")
        n_split = int(np.prod(self.split))
        if int(np.prod(self.out)) != n_split:
            raise ValueError(f"element count mismatch: split {self.split} vs out {self.out}")
        if self.src and int(np.prod(self.src)) != n_split:
            raise ValueError(f"element count mismatch: src {self.src} vs split {self.split}")

    def inverse(self) -> "PermuteSpec":
        if not self.src:
            raise ValueError("inverse needs the source shape recorded in `src`")
        inv = tuple(int(i) for i in np.argsort(self.perm))
        permuted = tuple(self.split[p] for p in self.perm)
        return PermuteSpec(split=permuted, perm=inv, out=self.src, src=self.out)


def identity_spec(shape: Sequence[int]) -> PermuteSpec:
    shape = tuple(shape)
    return PermuteSpec(split=shape, perm=tuple(range(len(shape))), out=shape, src=shape)


def reshape_permute(t: ChunkTensor | np.ndarray, spec: PermuteSpec,
                    layout: Layout | None = None):
    """Apply ``spec`` to a tensor; ChunkTensor in gives ChunkTensor out."""
    arr = t.data if isinstance(t, ChunkTensor) else np.asarray(t)
    if arr.size != int(np.prod(spec.split)):
        raise ValueError(f"element count mismatch: tensor {arr.shape} vs split {spec.split}")
    if spec.src and arr.shape != spec.src:
        raise ValueError(f"tensor shape {arr.shape} does not match spec source {spec.src}")
    res = arr.reshape(spec.split).transpose(spec.perm).reshape(spec.out)
    if isinstance(t, ChunkTensor):
        return ChunkTensor(res, layout or t.layout)
    return np.ascontiguousarray(res)


def split_seq(t: ChunkTensor, u: int) -> list[ChunkTensor]:
    """Slice the token axis into ``u`` equal consecutive chunks."""
    if u < 1 or t.s % u:
        raise ValueError(f"cannot split {t.s} tokens into {u} equal chunks")
    c = t.s // u
    return [ChunkTensor(t.data[:, i * c:(i + 1) * c], t.layout) for i in range(u)]


def concat_seq(chunks: Sequence[ChunkTensor]) -> ChunkTensor:
    if not chunks:
        raise ValueError("nothing to concatenate")
    layout = chunks[0].layout
    return ChunkTensor(np.concatenate([c.data for c in chunks], axis=1), layout)
