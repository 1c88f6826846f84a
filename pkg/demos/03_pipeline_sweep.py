"""Simulate the fetch/compute pipeline and pick a chunk size.

Run with ``python3 demos/03_pipeline_sweep.py``. Writes ``trace.json``, which
opens in chrome://tracing or Perfetto.
"""

from fpdt.memory import GB, ModelShape, TrainConfig
from fpdt.perfsim import (GPT_6P7B, HardwareProfile, SchedulePlan, crossover_chunk_size,
                          crossover_closed_form, simulate, sweep_chunk_size, write_chrome_trace)

hw = HardwareProfile()

# Below the crossover the host link cannot keep up with attention compute.
print(f"crossover: {crossover_closed_form(hw):.0f} tokens, rounded up to "
      f"{crossover_chunk_size(hw, GPT_6P7B, 4)}")

# One 256K-token schedule on 4 devices with 8K-token chunks, prefetch on and off.
for db in (True, False):
    tl = simulate(SchedulePlan(256 * 1024, 32, double_buffer=db), hw)
    busy = ", ".join(f"{s} {tl.busy_fraction(s):.2f}" for s in tl.busy)
    print(f"double buffer {'on ' if db else 'off'}: makespan {tl.makespan:.3f} s, "
          f"MFU {tl.mfu:.3f}, busy {busy}")
write_chrome_trace(simulate(SchedulePlan(256 * 1024, 8), hw), "trace.json")

# Dropping off-diagonal blocks saves compute but not query-side fetches, so
# in the fetch-bound regime the useful-flop rate falls.
for rho in (0.0, 0.25, 0.5):
    print(f"sparsity {rho}: MFU {simulate(SchedulePlan(256 * 1024, 32, rho=rho), hw).mfu:.3f}")

# Sweep chunk sizes: small chunks starve on fetches, one huge chunk loses the
# overlap and blows up device memory.
cfg = TrainConfig(model=ModelShape(32, 4096, 32, 128, 16384, 50257), s_global=256 * 1024,
                  p=4, shard_degree=4, ac=True, oc=True, offload=True,
                  activation_multiplier=9.8)
rows, best = sweep_chunk_size(cfg, hw, [8192, 16384, 32768, 65536, 131072, 262144])
for r in rows:
    print(f"chunk {r.chunk // 1024:4d}K (u={r.u:2d}): MFU {r.mfu:.3f}, "
          f"peak HBM {r.peak_hbm_bytes / GB:6.1f} GB")
print(f"best chunk: {best // 1024}K")
