"""TOML run configuration: schema, defaults, validation and provenance hash."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .memory import GB, ModelShape, TrainConfig
from .perfsim import HardwareProfile, SimModel

CONFIG_ENV = "FPDT_CONFIG"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


# section -> key -> (type, default, help)
SCHEMA: dict[str, dict[str, tuple[type, Any, str]]] = {
    "model": {
        "layers": (int, 32, "transformer layers"),
        "hidden": (int, 4096, "hidden size; must equal heads * head_dim"),
        "heads": (int, 32, "attention heads"),
        "head_dim": (int, 128, "per-head dimension"),
        "ffn_dim": (int, 16384, "FFN inner size"),
        "vocab": (int, 50257, "vocabulary size"),
        "param_count": (float, 0.0, "parameter count; 0 derives it from the shape"),
    },
    "parallel": {
        "s_global": (int, 262144, "global sequence length (power of two)"),
        "batch": (int, 1, "micro-batch size"),
        "p": (int, 4, "sequence-parallel degree"),
        "shard_degree": (int, 4, "ZeRO-3 sharding degree for model states"),
    },
    "chunks": {
        "u_attn": (int, 4, "attention chunks per device sequence"),
        "double_buffer": (bool, True, "prefetch into a second buffer"),
        "sparsity": (float, 0.0, "fraction of off-diagonal causal blocks dropped"),
        "sweep_sizes": (list, [8192, 16384, 32768, 65536, 131072, 262144],
                        "chunk lengths for the sweep command"),
    },
    "hardware": {
        "peak_flops": (float, 312e12, "device peak flop/s"),
        "flop_efficiency": (float, 0.5, "achievable fraction of peak (calibration)"),
        "nvlink_bw": (float, 100e9, "intra-node peer bandwidth, bytes/s"),
        "pcie_bw": (float, 32e9, "host link bandwidth, bytes/s, one direction"),
        "pcie_sharing": (int, 4, "devices sharing one host link"),
        "internode_bw": (float, 25e9, "inter-node bandwidth, bytes/s"),
        "devices_per_node": (int, 4, "devices per node"),
        "fixed_latency": (float, 20e-6, "per-op launch overhead, s (calibration)"),
        "train_dtype_bytes": (int, 2, "bytes per element in the simulated run"),
        "htod_strategy": (str, "A", "A: every device fetches; B: one fetch + scatter"),
    },
    "strategies": {
        "ac": (bool, True, "activation checkpointing"),
        "oc": (bool, True, "offload checkpoints to host"),
        "offload": (bool, True, "chunked attention with host offload"),
        "activation_multiplier": (float, 9.8, "calibration multiplier on transient activations"),
        "bytes_per_param": (float, 16.0, "model-state bytes per parameter"),
    },
    "budgets": {
        "hbm_gb": (float, 80.0, "device memory, GB"),
        "host_gb": (float, 256.0, "host memory per device, GB"),
    },
    "verify": {
        "seed": (int, 0, "base seed"),
        "sizes": (list, [32, 64, 128], "global sequence lengths checked"),
        "p": (int, 2, "ranks in the functional check"),
        "u_attn": (int, 4, "attention chunks in the functional check"),
        "heads": (int, 4, "heads in the functional check"),
        "head_dim": (int, 4, "head dim in the functional check"),
        "tol_forward": (float, 1e-9, "max abs forward error"),
        "tol_grad": (float, 1e-8, "max abs gradient error"),
    },
}


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def hash(self) -> str:
        blob = json.dumps(self.values, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_shape(self) -> ModelShape:
        m = self["model"]
        return ModelShape(layers=m["layers"], hidden=m["hidden"], heads=m["heads"],
                          head_dim=m["head_dim"], ffn_dim=m["ffn_dim"], vocab=m["vocab"],
                          param_count=m["param_count"] or None)

    def train_config(self) -> TrainConfig:
        par, ch, st, bu = self["parallel"], self["chunks"], self["strategies"], self["budgets"]
        return TrainConfig(model=self.model_shape(), s_global=par["s_global"], batch=par["batch"],
                           p=par["p"], shard_degree=par["shard_degree"], u_attn=ch["u_attn"],
                           dtype_bytes=self["hardware"]["train_dtype_bytes"], ac=st["ac"],
                           oc=st["oc"], offload=st["offload"], hbm_bytes=bu["hbm_gb"] * GB,
                           host_bytes=bu["host_gb"] * GB,
                           activation_multiplier=st["activation_multiplier"],
                           bytes_per_param=st["bytes_per_param"])

    def hardware(self) -> HardwareProfile:
        return HardwareProfile(**self["hardware"])

    def sim_model(self) -> SimModel:
        m = self["model"]
        return SimModel(hidden=m["hidden"], heads=m["heads"], head_dim=m["head_dim"],
                        ffn_dim=m["ffn_dim"], batch=self["parallel"]["batch"])


def defaults() -> dict[str, dict[str, Any]]:
    return {sec: {k: (list(v[1]) if isinstance(v[1], list) else v[1]) for k, v in keys.items()}
            for sec, keys in SCHEMA.items()}


def _coerce(sec: str, key: str, value: Any) -> Any:
    typ = SCHEMA[sec][key][0]
    where = f"[{sec}].{key}"
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool)
                                              for v in value):
        raise ConfigError(f"{where} must be a list of integers")
    return list(value)


def validate(values: dict[str, dict[str, Any]]) -> None:
    par, ch, m, ver = values["parallel"], values["chunks"], values["model"], values["verify"]
    for sec in ("model", "parallel", "budgets"):
        for k, v in values[sec].items():
            if k != "param_count" and v <= 0:
                raise ConfigError(f"[{sec}].{k} must be positive")
    if m["param_count"] < 0:
        raise ConfigError("[model].param_count must be >= 0")
    if m["hidden"] != m["heads"] * m["head_dim"]:
        raise ConfigError("[model].hidden must equal heads * head_dim")
    s, p, u = par["s_global"], par["p"], ch["u_attn"]
    if not _is_pow2(s):
        raise ConfigError(f"[parallel].s_global={s}: only power-of-two sequence lengths are supported")
    if u < 1 or s % (p * u):
        raise ConfigError(f"s_global={s} is not divisible by p*u_attn={p}*{u}")
    if m["heads"] % p:
        raise ConfigError(f"heads={m['heads']} not divisible by p={p}")
    if not 0 <= ch["sparsity"] <= 1:
        raise ConfigError("[chunks].sparsity must lie in [0, 1]")
    for size in ch["sweep_sizes"]:
        if size <= 0 or s % size:
            raise ConfigError(f"sweep size {size} does not divide s_global={s}")
    if values["strategies"]["oc"] and not values["strategies"]["ac"]:
        raise ConfigError("[strategies].oc requires ac")
    for size in ver["sizes"]:
        if not _is_pow2(size):
            raise ConfigError(f"[verify].sizes: {size} is not a power of two")
        if size % (ver["p"] * ver["u_attn"]):
            raise ConfigError(f"[verify].sizes: {size} is not divisible by p*u_attn="
                              f"{ver['p']}*{ver['u_attn']}")
    if ver["heads"] % ver["p"]:
        raise ConfigError("[verify].heads must be divisible by [verify].p")
    try:
        HardwareProfile(**values["hardware"])
    except ValueError as exc:
        raise ConfigError(f"[hardware]: {exc}") from exc


def from_dict(raw: dict[str, Any], source: str = "<dict>") -> RunConfig:
    values = defaults()
    for sec, body in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{sec}] must be a table")
        for key, v in body.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key [{sec}].{key}")
            values[sec][key] = _coerce(sec, key, v)
    validate(values)
    return RunConfig(values, source)


def default_config_path() -> Path:
    return Path(str(resources.files("fpdt") / "configs" / "default.toml"))


def load(path: str | os.PathLike | None = None) -> RunConfig:
    """Load ``path``, else ``$FPDT_CONFIG``, else the shipped default."""
    path = path or os.environ.get(CONFIG_ENV) or default_config_path()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw, str(path))


def explain(cfg: RunConfig | None = None) -> str:
    cfg = cfg or RunConfig(defaults())
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key, (_, default, help_) in keys.items():
            lines.append(f"{key} = {cfg[sec][key]!r}  # default {default!r}; {help_}")
        lines.append("")
    return "\n".join(lines)
