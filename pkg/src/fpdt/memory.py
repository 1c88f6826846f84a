"""Closed-form activation and model-state memory accounting.

Per-step footprints are coefficients times ``N * hidden`` elements, with
``N = batch * s_global / p`` tokens per device:

    step        hidden  qkv_proj  all2all  attention  ffn  other
    forward       1        3         4         4        4     3
    backward      2        6         4         8        8     0

Peak formula. For every (pass, step) the concurrent set is the pass's
hidden-state buffer plus that step's transient buffers; the peak is the
largest concurrent set, plus layer-persistent activations::

    peak = persistent + max_{pass, step} (hidden[pass] + cal * transient[pass, step]) * N * H * bytes

With chunking and offload enabled, every step except the hidden state is
chunk-scaled: the attention-side steps (qkv_proj, all2all, attention) by
``u_attn`` and the token-wise steps (ffn, other) by ``u_ffn``. One ``N*H``
output accumulator in each attention pass stays whole (``o`` forward,
``dq`` backward).

Persistent activations: without activation checkpointing every layer keeps
its forward set; with checkpointing one hidden state per layer; with
checkpoint offload those checkpoints live in host memory instead.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

STEPS = ("hidden", "qkv_proj", "all2all", "attention", "ffn", "other")
PASSES = ("forward", "backward")
ATTN_STEPS = ("qkv_proj", "all2all", "attention")
TOKENWISE_STEPS = ("ffn", "other")

# calibrated against a 2.7B GPT at 256K tokens on 4 devices (27 GB activations)
CALIBRATED_ACTIVATION_MULTIPLIER = 9.8
DEFAULT_BYTES_PER_PARAM = 16.0  # 2 param + 2 grad + 12 optimizer (fp32 master, m, v)
GB = 1e9


class ModelDoesNotFit(ValueError):
    """The model states alone exceed device memory."""


@dataclass(frozen=True)
class StepCoeffs:
    forward: dict[str, float] = field(default_factory=lambda: {
        "hidden": 1, "qkv_proj": 3, "all2all": 4, "attention": 4, "ffn": 4, "other": 3})
    backward: dict[str, float] = field(default_factory=lambda: {
        "hidden": 2, "qkv_proj": 6, "all2all": 4, "attention": 8, "ffn": 8, "other": 0})
    # accumulator share of the attention step that is never chunked
    attention_whole: float = 1.0

    def __post_init__(self) -> None:
        for table in (self.forward, self.backward):
            if set(table) != set(STEPS):
                raise ValueError(f"coefficients needed for exactly {STEPS}")
            if any(v < 0 for v in table.values()):
                raise ValueError("coefficients must be non-negative")

    def get(self, pass_: str, step: str) -> float:
        return getattr(self, pass_)[step]

    def table(self) -> list[list]:
        return [[pass_] + [self.get(pass_, s) for s in STEPS] for pass_ in PASSES]


@dataclass(frozen=True)
class ModelShape:
    layers: int
    hidden: int
    heads: int
    head_dim: int
    ffn_dim: int
    vocab: int
    param_count: float | None = None

    def __post_init__(self) -> None:
        if self.hidden != self.heads * self.head_dim:
            raise ValueError(f"hidden={self.hidden} != heads*head_dim={self.heads * self.head_dim}")
        if min(self.layers, self.hidden, self.heads, self.ffn_dim, self.vocab) <= 0:
            raise ValueError("model dimensions must be positive")

    @property
    def params(self) -> float:
        if self.param_count is not None:
            return float(self.param_count)
        per_layer = 4 * self.hidden ** 2 + 2 * self.hidden * self.ffn_dim
        return float(self.layers * per_layer + 2 * self.vocab * self.hidden)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelShape
    s_global: int
    batch: int = 1
    p: int = 1
    shard_degree: int = 1
    u_attn: int = 1
    dtype_bytes: int = 2
    ac: bool = False
    oc: bool = False
    offload: bool = False
    hbm_bytes: float = 80 * GB
    host_bytes: float = 256 * GB
    activation_multiplier: float = 1.0
    bytes_per_param: float = DEFAULT_BYTES_PER_PARAM

    def __post_init__(self) -> None:
        if self.hbm_bytes <= 0 or self.host_bytes <= 0:
            raise ValueError("budgets must be positive")
        if min(self.s_global, self.batch, self.p, self.shard_degree, self.u_attn, self.dtype_bytes) < 1:
            raise ValueError("sizes and degrees must be >= 1")
        if self.oc and not self.ac:
            raise ValueError("checkpoint offload requires activation checkpointing")

    @property
    def tokens_per_device(self) -> float:
        return self.batch * self.s_global / self.p

    @property
    def chunking(self) -> bool:
        return self.offload and self.u_attn > 1

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class ChunkPlan:
    u_attn: int
    u_ffn: int
    u_loss: int


def chunk_plan(cfg: TrainConfig) -> ChunkPlan:
    """FFN chunks at twice the attention count; loss chunks at ``2 * ceil(vocab/hidden)``."""
    m = cfg.model
    return ChunkPlan(u_attn=cfg.u_attn, u_ffn=2 * cfg.u_attn,
                     u_loss=2 * math.ceil(m.vocab / m.hidden))


@dataclass
class StepBytes:
    pass_: str
    step: str
    coeff: float
    whole_bytes: float
    chunked_bytes: float
    divisor: int

    @property
    def bytes(self) -> float:
        return self.whole_bytes + self.chunked_bytes


@dataclass
class MemLedger:
    steps: list[StepBytes]
    peak_activation_bytes: float
    peak_step: tuple[str, str]
    persistent_bytes: float
    model_state_bytes: float
    host_bytes_used: float
    headroom: float
    u_ffn: int = 1

    @property
    def total_bytes(self) -> float:
        return self.peak_activation_bytes + self.model_state_bytes

    def step(self, pass_: str, step: str) -> StepBytes:
        for s in self.steps:
            if s.pass_ == pass_ and s.step == step:
                return s
        raise KeyError((pass_, step))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["peak_step"] = list(self.peak_step)
        return d


def model_state_bytes(cfg: TrainConfig) -> float:
    """Parameters, gradients and optimizer states, sharded ``shard_degree`` ways."""
    if cfg.shard_degree < 1:
        raise ValueError("shard_degree must be >= 1")
    return cfg.model.params * cfg.bytes_per_param / cfg.shard_degree


def _step_divisor(cfg: TrainConfig, step: str, u_ffn: int) -> int:
    if not cfg.chunking or step == "hidden":
        return 1
    return cfg.u_attn if step in ATTN_STEPS else u_ffn


def activation_peak(cfg: TrainConfig, coeffs: StepCoeffs | None = None) -> MemLedger:
    coeffs = coeffs or StepCoeffs()
    unit = cfg.tokens_per_device * cfg.model.hidden * cfg.dtype_bytes
    cal = cfg.activation_multiplier
    u_ffn = chunk_plan(cfg).u_ffn if cfg.chunking else 1
    steps = []
    for pass_ in PASSES:
        for step in STEPS:
            k = coeffs.get(pass_, step)
            div = _step_divisor(cfg, step, u_ffn)
            if step == "hidden":
                whole, chunked = k * unit, 0.0
            elif step == "attention" and div > 1:
                w = min(coeffs.attention_whole, k)
                whole, chunked = cal * w * unit, cal * (k - w) * unit / div
            else:
                whole, chunked = 0.0, cal * k * unit / div
            steps.append(StepBytes(pass_, step, k, whole, chunked, div))

    layers = cfg.model.layers
    fwd_sum = sum(coeffs.forward.values())
    if not cfg.ac:
        persistent = layers * fwd_sum * unit
    elif not cfg.oc:
        persistent = layers * unit
    else:
        persistent = 0.0

    peak, where = 0.0, ("forward", "hidden")
    for pass_ in PASSES:
        hid = next(s.bytes for s in steps if s.pass_ == pass_ and s.step == "hidden")
        for s in steps:
            if s.pass_ != pass_:
                continue
            conc = s.bytes if s.step == "hidden" else hid + s.bytes
            if conc > peak:
                peak, where = conc, (pass_, s.step)
    peak += persistent

    host = 0.0
    if cfg.oc:
        host += layers * unit
    if cfg.offload:
        # cached q, k, v and forward output of the layer in flight
        host += 4 * unit
    ms = model_state_bytes(cfg)
    return MemLedger(steps=steps, peak_activation_bytes=peak, peak_step=where,
                     persistent_bytes=persistent, model_state_bytes=ms,
                     host_bytes_used=host, headroom=cfg.hbm_bytes - peak - ms, u_ffn=u_ffn)


def fits(cfg: TrainConfig, coeffs: StepCoeffs | None = None) -> bool:
    led = activation_peak(cfg, coeffs)
    return led.total_bytes <= cfg.hbm_bytes and led.host_bytes_used <= cfg.host_bytes


def max_seq_len(cfg: TrainConfig, coeffs: StepCoeffs | None = None,
                hbm_bytes: float | None = None, limit_log2: int = 40) -> int:
    """Largest power-of-two ``s_global`` that fits both budgets.

    Doubling finds the first infeasible power, then bisection over the
    exponent pins the boundary. Returns 0 when not even the smallest
    sequence (one token per device) fits.
    """
    if hbm_bytes is not None:
        cfg = cfg.with_(hbm_bytes=hbm_bytes)
    if model_state_bytes(cfg) >= cfg.hbm_bytes:
        raise ModelDoesNotFit(
            f"model states need {model_state_bytes(cfg) / GB:.1f} GB, "
            f"device has {cfg.hbm_bytes / GB:.1f} GB: the model itself cannot fit")

    def ok(e: int) -> bool:
        return fits(cfg.with_(s_global=2 ** e), coeffs)

    lo = max(0, math.ceil(math.log2(cfg.p)))
    if not ok(lo):
        return 0
    hi = lo + 1
    while hi <= limit_log2 and ok(hi):
        lo, hi = hi, hi + (hi - lo)
        hi = min(hi, limit_log2 + 1)
    if hi > limit_log2:
        return 2 ** lo
    # ok(lo) and not ok(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return 2 ** lo


def report_rows(cfg: TrainConfig, coeffs: StepCoeffs | None = None) -> list[dict]:
    led = activation_peak(cfg, coeffs)
    rows = []
    for s in led.steps:
        rows.append({"pass": s.pass_, "step": s.step, "coeff_Nd": s.coeff, "divisor": s.divisor,
                     "whole_bytes": s.whole_bytes, "chunked_bytes": s.chunked_bytes,
                     "bytes": s.bytes})
    return rows


def report_csv(cfg: TrainConfig, coeffs: StepCoeffs | None = None) -> str:
    coeffs = coeffs or StepCoeffs()
    buf = io.StringIO()
    buf.write("# coeffs,pass," + ",".join(STEPS) + "\n")
    for row in coeffs.table():
        buf.write("# coeffs," + ",".join(str(v) for v in row) + "\n")
    rows = report_rows(cfg, coeffs)
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def gpt_2p7b(**kw) -> TrainConfig:
    """GPT 2.7B at 256K tokens on 4 devices, checkpointing with offload."""
    model = ModelShape(layers=32, hidden=2560, heads=32, head_dim=80, ffn_dim=10240,
                       vocab=50257, param_count=2.7e9)
    base = dict(model=model, s_global=256 * 1024, p=4, shard_degree=4, ac=True, oc=True,
                activation_multiplier=CALIBRATED_ACTIVATION_MULTIPLIER)
    base.update(kw)
    return TrainConfig(**base)


def llama_8b(**kw) -> TrainConfig:
    """Llama-3 8B on 8 devices (two 4-GPU nodes, 1 TB host memory each)."""
    model = ModelShape(layers=32, hidden=4096, heads=32, head_dim=128, ffn_dim=14336,
                       vocab=128256, param_count=8.03e9)
    base = dict(model=model, s_global=512 * 1024, p=8, shard_degree=8, ac=True, oc=True,
                hbm_bytes=80 * GB, host_bytes=1000 * GB / 4,
                activation_multiplier=CALIBRATED_ACTIVATION_MULTIPLIER)
    base.update(kw)
    return TrainConfig(**base)
