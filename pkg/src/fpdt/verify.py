"""Oracle comparison of the chunked block against the monolithic block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import (BlockWeights, ChunkPlanExec, block_reference_backward,
                    block_reference_forward, fpdt_block_backward, fpdt_block_forward)
from .layout import RankGroup
from .numeric import make_rng, random_tensor
from .store import OffloadStore

FORMAT = "fpdt.verify/1"


@dataclass
class CaseResult:
    s_global: int
    p: int
    u: int
    seed: int
    err_forward: float
    err_d_hidden: float
    err_grads: float
    rel_err_grads: float
    residency_strict: int
    residency_double: int
    stores_empty: bool
    ledger: dict


def _rel(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def ffn_chunks_for(s_local: int, u: int) -> int:
    """``2u`` FFN chunks when they divide the local sequence, else ``u``."""
    return 2 * u if s_local % (2 * u) == 0 else u


def run_case(s_global: int, p: int, u: int, seed: int, heads: int = 4, head_dim: int = 4,
             batch: int = 1) -> CaseResult:
    w = BlockWeights.random(seed, heads, head_dim)
    x = random_tensor(make_rng(seed + 1000), (batch, s_global, heads, head_dim))
    d_out = random_tensor(make_rng(seed + 2000), x.shape)
    plan = ChunkPlanExec(u, ffn_chunks_for(s_global // p, u))

    group = RankGroup.from_global(x, p, u)
    stores = [OffloadStore() for _ in range(p)]
    fwd = fpdt_block_forward(group, w, plan, stores)
    residency_strict = max(max(st.highwater("k"), st.highwater("v")) for st in stores)
    out = group.to_global(fwd.outputs)
    ref = block_reference_forward(x, w)

    bwd = fpdt_block_backward(fwd.saved, RankGroup.from_global(d_out, p, u).local, w, stores)
    d_hidden = group.to_global(bwd.d_hidden)
    d_ref, g_ref = block_reference_backward(x, w, d_out)
    ledger = stores[0].report()

    # replay the forward with double buffering for the second residency bound
    db_stores = [OffloadStore() for _ in range(p)]
    fpdt_block_forward(RankGroup.from_global(x, p, u), w, plan, db_stores, double_buffer=True)
    residency_double = max(max(st.highwater("k"), st.highwater("v")) for st in db_stores)

    return CaseResult(
        s_global=s_global, p=p, u=u, seed=seed,
        err_forward=float(np.max(np.abs(out.data - ref.data))),
        err_d_hidden=float(np.max(np.abs(d_hidden.data - d_ref.data))),
        err_grads=max(float(np.max(np.abs(bwd.grads[k] - g_ref[k]))) for k in g_ref),
        rel_err_grads=max(_rel(bwd.grads[k], g_ref[k]) for k in g_ref),
        residency_strict=residency_strict, residency_double=residency_double,
        stores_empty=all(len(st) == 0 for st in stores), ledger=ledger)


def verify(sizes, p: int, u: int, seed: int, heads: int, head_dim: int,
           tol_forward: float, tol_grad: float) -> dict:
    cases = [run_case(s, p, u, seed, heads, head_dim) for s in sizes]
    max_fwd = max(c.err_forward for c in cases)
    max_grad = max(max(c.err_grads, c.err_d_hidden) for c in cases)
    strict = max(c.residency_strict for c in cases)
    double = max(c.residency_double for c in cases)
    passed = (max_fwd < tol_forward and max_grad < tol_grad and strict == 1 and double <= 2
              and all(c.stores_empty for c in cases))
    return {
        "format": FORMAT,
        "passed": passed,
        "max_abs_err_forward": max_fwd,
        "max_abs_err_grads": max_grad,
        "max_rel_err_grads": max(c.rel_err_grads for c in cases),
        "residency_highwater": strict,
        "residency_highwater_double_buffer": double,
        "tolerances": {"forward": tol_forward, "grads": tol_grad},
        "cases": [{"s_global": c.s_global, "p": c.p, "u": c.u, "seed": c.seed,
                   "err_forward": c.err_forward, "err_grads": max(c.err_grads, c.err_d_hidden),
                   "stores_empty": c.stores_empty} for c in cases],
        "ledger": cases[-1].ledger,
    }
