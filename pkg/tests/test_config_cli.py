import json

import pytest

from fpdt import cli, config
from fpdt.config import ConfigError


def write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_shipped_default_loads():
    cfg = config.load()
    assert cfg["parallel"]["s_global"] == 262144
    assert cfg.hardware().peak_flops == 312e12
    assert len(cfg.hash) == 16


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config.from_dict({"model": {"layerz": 3}})
    with pytest.raises(ConfigError, match="unknown section"):
        config.from_dict({"misc": {}})


def test_type_and_value_checks():
    with pytest.raises(ConfigError):
        config.from_dict({"parallel": {"p": "four"}})
    with pytest.raises(ConfigError, match="power-of-two"):
        config.from_dict({"parallel": {"s_global": 3 * 2 ** 16}})
    with pytest.raises(ConfigError, match="divisible"):
        config.from_dict({"chunks": {"u_attn": 3}})
    with pytest.raises(ConfigError, match="hardware"):
        config.from_dict({"hardware": {"flop_efficiency": 1.5}})


def test_hash_tracks_content():
    a = config.from_dict({})
    b = config.from_dict({"chunks": {"u_attn": 8}})
    assert a.hash == config.from_dict({}).hash != b.hash


def test_explain_lists_every_default(capsys):
    code, out, _ = run(capsys, "--explain")
    assert code == 0
    for sec, keys in config.SCHEMA.items():
        assert f"[{sec}]" in out
        for key in keys:
            assert f"{key} = " in out


def test_verify_default_passes(capsys):
    code, out, err = run(capsys, "verify", "--stats")
    doc = json.loads(out)
    assert code == 0 and doc["passed"]
    assert doc["residency_highwater"] == 1
    assert "residency high-water (strict forward): 1" in err
    assert doc["format"] == "fpdt.verify/1" and doc["config_hash"]
    assert {"max_abs_err_forward", "max_rel_err_grads", "ledger"} <= set(doc)


def test_verify_tolerance_failure_exits_1(capsys, tmp_path):
    path = write(tmp_path, "[verify]\ntol_forward = 1e-30\n")
    code, out, _ = run(capsys, "--config", path, "verify")
    assert code == 1 and not json.loads(out)["passed"]


def test_bad_divisibility_exits_2(capsys, tmp_path):
    path = write(tmp_path, "[chunks]\nu_attn = 3\n")
    code, _, err = run(capsys, "--config", path, "verify")
    assert code == 2 and "divisible" in err
    code, _, err = run(capsys, "verify", "--sizes", "48")
    assert code == 2 and "power of two" in err


def test_env_var_selects_config(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(config.CONFIG_ENV, write(tmp_path, "[model]\nbogus = 1\n"))
    code, _, err = run(capsys, "crossover")
    assert code == 2 and "bogus" in err


def test_mem_report_csv_and_json(capsys):
    code, out, _ = run(capsys, "mem-report")
    assert code == 0 and out.splitlines()[1] == "# coeffs,forward,1,3,4,4,4,3"
    _, out4, _ = run(capsys, "mem-report", "--format", "json", "--u", "4")
    _, out8, _ = run(capsys, "mem-report", "--format", "json", "--u", "8")
    rows4 = {(r["pass"], r["step"]): r for r in json.loads(out4)["rows"]}
    rows8 = {(r["pass"], r["step"]): r for r in json.loads(out8)["rows"]}
    for key, r in rows4.items():
        assert rows8[key]["chunked_bytes"] * 2 == pytest.approx(r["chunked_bytes"], rel=1e-15)


def test_simulate_trace_and_double_buffer(capsys, tmp_path):
    trace = tmp_path / "out.json"
    code, out_on, _ = run(capsys, "simulate", "--trace", str(trace), "--double-buffer", "on")
    assert code == 0
    assert json.loads(trace.read_text())["traceEvents"]
    _, out_off, _ = run(capsys, "simulate", "--double-buffer", "off")
    assert json.loads(out_off)["makespan_s"] >= json.loads(out_on)["makespan_s"]


def test_sweep_and_crossover(capsys, tmp_path):
    csv_path = tmp_path / "sweep.csv"
    code, out, _ = run(capsys, "sweep", "--csv", str(csv_path))
    doc = json.loads(out)
    assert code == 0 and doc["interior_argmax"]
    assert len(csv_path.read_text().splitlines()) == 7
    code, out, _ = run(capsys, "crossover")
    assert code == 0 and 32768 <= json.loads(out)["crossover_chunk"] <= 65536


def test_outputs_deterministic(capsys):
    _, a, _ = run(capsys, "sweep")
    _, b, _ = run(capsys, "sweep")
    assert a == b
