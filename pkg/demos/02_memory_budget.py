"""How chunking and offload move the longest trainable sequence.

Run with ``python3 demos/02_memory_budget.py``.
"""

from fpdt.memory import GB, activation_peak, gpt_2p7b, llama_8b, max_seq_len

# Per-step activation bytes for a 2.7B model at 256K tokens. Attention-side
# steps shrink as 1/u once the sequence is processed chunk by chunk.
for u in (1, 2, 4, 8):
    led = activation_peak(gpt_2p7b(offload=u > 1, u_attn=u))
    print(f"2.7B, u={u}: peak activations {led.peak_activation_bytes / GB:6.2f} GB "
          f"at {led.peak_step}, model states {led.model_state_bytes / GB:5.2f} GB")

# The 8B model on eight devices: without chunking the sequence tops out at
# 512K tokens; with 64 chunks and host offload it reaches 4M.
base = llama_8b()
off = max_seq_len(base.with_(offload=False, u_attn=1))
print(f"\n8B without chunking: {off:,} tokens")
for u in (8, 16, 32, 64):
    on = max_seq_len(base.with_(offload=True, u_attn=u))
    print(f"8B with u={u:2d}: {on:,} tokens ({on / off:g}x)")

led = activation_peak(base.with_(s_global=4 * 1024 * 1024, offload=True, u_attn=64))
print(f"\nat 4M tokens the host holds {led.host_bytes_used / GB:.1f} GB per device, "
      f"device headroom {led.headroom / GB:.1f} GB")
