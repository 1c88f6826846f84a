"""Walk through one chunked transformer block on four simulated ranks.

Run with ``python3 demos/01_chunked_block.py``.
"""

import numpy as np

from fpdt.block import (BlockWeights, ChunkPlanExec, block_reference_backward,
                        block_reference_forward, fpdt_block_backward, fpdt_block_forward)
from fpdt.layout import RankGroup
from fpdt.numeric import make_rng, random_tensor
from fpdt.store import OffloadStore

# A tiny block: 4 heads of width 4, a 128-token sequence split over 4 ranks.
# Each rank holds 32 tokens, cut into 4 attention chunks of 8 tokens.
S, P, U, HEADS, HEAD_DIM = 128, 4, 4, 4, 4
w = BlockWeights.random(0, HEADS, HEAD_DIM)
x = random_tensor(make_rng(1), (1, S, HEADS, HEAD_DIM))

# Chunk i of every rank forms one contiguous slice of the global sequence
# after the head-scatter exchange, so causal masking stays simple.
group = RankGroup.from_global(x, P, U)
print("local shard per rank:", group.local[0].shape)

# Forward with host offload: key/value chunks are parked in each rank's store
# and fetched back one at a time while the query chunk attends to its history.
stores = [OffloadStore() for _ in range(P)]
fwd = fpdt_block_forward(group, w, ChunkPlanExec(U, 2 * U), stores)
out = group.to_global(fwd.outputs)
ref = block_reference_forward(x, w)
print("forward max abs error vs monolithic block:", np.max(np.abs(out.data - ref.data)))
print("device-resident kv chunks at peak (strict):",
      max(max(st.highwater("k"), st.highwater("v")) for st in stores))

# Backward runs the kv loop outside and the query loop inside, so each kv
# chunk gradient finishes before the next one is fetched.
d_out = random_tensor(make_rng(2), x.shape)
bwd = fpdt_block_backward(fwd.saved, RankGroup.from_global(d_out, P, U).local, w, stores)
d_ref, g_ref = block_reference_backward(x, w, d_out)
print("input-gradient max abs error:",
      np.max(np.abs(group.to_global(bwd.d_hidden).data - d_ref.data)))
for name in g_ref:
    print(f"  d{name} max abs error: {np.max(np.abs(bwd.grads[name] - g_ref[name])):.2e}")
print("stores empty after backward:", all(len(st) == 0 for st in stores))

# With double buffering the next chunk is prefetched while the current one is
# in use, which doubles the resident count but never exceeds two.
db_stores = [OffloadStore() for _ in range(P)]
fpdt_block_forward(RankGroup.from_global(x, P, U), w, ChunkPlanExec(U, 2 * U), db_stores,
                   double_buffer=True)
print("device-resident kv chunks at peak (double-buffered):",
      max(max(st.highwater("k"), st.highwater("v")) for st in db_stores))
