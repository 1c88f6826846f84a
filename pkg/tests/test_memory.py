from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpdt.memory import (ATTN_STEPS, GB, TOKENWISE_STEPS, ModelDoesNotFit, ModelShape, StepCoeffs,
                         TrainConfig, activation_peak, chunk_plan, gpt_2p7b, llama_8b,
                         max_seq_len, model_state_bytes, report_csv)

SNAPSHOTS = Path(__file__).parent / "snapshots"
TABLE = {"forward": [1, 3, 4, 4, 4, 3], "backward": [2, 6, 4, 8, 8, 0]}


def unit_cfg(**kw):
    # one token per device and hidden 1 at 1 byte: bytes == coefficient units
    base = dict(model=ModelShape(1, 1, 1, 1, 4, 1), s_global=1, dtype_bytes=1)
    base.update(kw)
    return TrainConfig(**base)


def test_default_coefficients_are_the_table():
    c = StepCoeffs()
    for pass_, row in TABLE.items():
        assert [r for r in c.table() if r[0] == pass_][0][1:] == row


def test_coefficients_validated():
    with pytest.raises(ValueError):
        StepCoeffs(forward={"hidden": -1, "qkv_proj": 3, "all2all": 4, "attention": 4, "ffn": 4,
                            "other": 3})


def test_attention_step_units():
    led = activation_peak(unit_cfg())
    assert led.step("forward", "attention").bytes == 4
    assert led.step("backward", "attention").bytes == 8


@pytest.mark.parametrize("u", [2, 4, 8])
def test_chunk_scaled_bytes_scale_exactly(u):
    base = activation_peak(unit_cfg(s_global=64, offload=True, u_attn=1))
    chunked = activation_peak(unit_cfg(s_global=64, offload=True, u_attn=u))
    for pass_ in ("forward", "backward"):
        for step in ATTN_STEPS:
            b, c = base.step(pass_, step), chunked.step(pass_, step)
            ref = b.chunked_bytes if step != "attention" else b.bytes - c.whole_bytes
            assert c.chunked_bytes * u == ref
        for step in TOKENWISE_STEPS:
            assert chunked.step(pass_, step).chunked_bytes * 2 * u == base.step(pass_, step).bytes
        assert chunked.step(pass_, "hidden").bytes == base.step(pass_, "hidden").bytes


def test_two_chunks_cut_2p7b_activations():
    before = activation_peak(gpt_2p7b()).peak_activation_bytes / GB
    after = activation_peak(gpt_2p7b(u_attn=2, offload=True)).peak_activation_bytes / GB
    assert abs(before - 27) / 27 <= 0.05
    assert abs(after - 18) / 18 <= 0.20
    assert after < before


def test_model_state_bytes():
    cfg = gpt_2p7b(shard_degree=1)
    assert model_state_bytes(cfg) == 4 * model_state_bytes(cfg.with_(shard_degree=4))
    assert abs(model_state_bytes(gpt_2p7b()) / GB - 10.8) < 1e-9
    zero = TrainConfig(model=ModelShape(1, 2, 1, 2, 4, 3, param_count=0), s_global=8)
    assert model_state_bytes(zero) == 0


def test_chunk_plan_rules():
    cfg = TrainConfig(model=ModelShape(1, 4096, 32, 128, 16384, 32000), s_global=8, u_attn=4)
    plan = chunk_plan(cfg)
    assert (plan.u_ffn, plan.u_loss) == (8, 16)
    same = TrainConfig(model=ModelShape(1, 64, 1, 64, 256, 64), s_global=8)
    assert chunk_plan(same).u_loss == 2


def test_model_that_cannot_fit():
    with pytest.raises(ModelDoesNotFit, match="cannot fit"):
        max_seq_len(llama_8b(shard_degree=1), hbm_bytes=100 * GB)


def test_more_chunks_never_shorten_max_length():
    cfg = llama_8b(offload=True)
    assert max_seq_len(cfg.with_(u_attn=8)) >= max_seq_len(cfg.with_(u_attn=1))


def test_max_seq_len_is_the_boundary():
    cfg = gpt_2p7b()
    n = max_seq_len(cfg)
    from fpdt.memory import fits
    assert fits(cfg.with_(s_global=n)) and not fits(cfg.with_(s_global=2 * n))


def test_eightfold_max_length():
    cfg = llama_8b()
    off = max_seq_len(cfg.with_(offload=False, u_attn=1))
    on = max_seq_len(cfg.with_(offload=True, u_attn=64))
    assert (off, on) == (512 * 1024, 4 * 1024 * 1024)


def test_shard_degree_only_touches_model_states():
    a = activation_peak(gpt_2p7b(shard_degree=1))
    b = activation_peak(gpt_2p7b(shard_degree=4))
    assert a.peak_activation_bytes == b.peak_activation_bytes
    assert a.model_state_bytes == 4 * b.model_state_bytes


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 20), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4, 8]),
       st.sampled_from([1, 2]), st.booleans(), st.booleans(), st.booleans())
def test_activation_peak_monotone(log_s, p, u, b, ac, oc, offload):
    cfg = gpt_2p7b(s_global=2 ** log_s, p=p, u_attn=u, batch=b, ac=ac, oc=oc and ac,
                   offload=offload)
    peak = activation_peak(cfg).peak_activation_bytes
    assert activation_peak(cfg.with_(s_global=2 * cfg.s_global)).peak_activation_bytes >= peak
    assert activation_peak(cfg.with_(batch=2 * b)).peak_activation_bytes >= peak
    assert activation_peak(cfg.with_(p=2 * p)).peak_activation_bytes <= peak
    assert activation_peak(cfg.with_(u_attn=2 * u)).peak_activation_bytes <= peak
    wider = ModelShape(32, 5120, 64, 80, 10240, 50257, param_count=2.7e9)
    assert activation_peak(cfg.with_(model=wider)).peak_activation_bytes >= peak


def test_report_header_and_halving():
    text = report_csv(gpt_2p7b(u_attn=4, offload=True))
    assert text.splitlines()[1] == "# coeffs,forward,1,3,4,4,4,3"
    assert text.splitlines()[2] == "# coeffs,backward,2,6,4,8,8,0"
    a = activation_peak(gpt_2p7b(u_attn=4, offload=True))
    b = activation_peak(gpt_2p7b(u_attn=8, offload=True))
    assert b.step("forward", "qkv_proj").bytes * 2 == a.step("forward", "qkv_proj").bytes


def test_llama_report_snapshot():
    from fpdt.config import load
    cfg = load(Path(__file__).parents[1] / "src/fpdt/configs/llama8b.toml").train_config()
    assert report_csv(cfg) == (SNAPSHOTS / "llama8b_mem_report.csv").read_text()
