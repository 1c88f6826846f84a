"""Discrete-event simulator of the chunked, offloaded attention schedule.

One simulated device runs three in-order streams: ``compute`` (kernels and
the Alltoall, which sits on the compute dependency chain but is timed at
link bandwidth), ``htod`` (prefetch from host) and ``dtoh`` (offload to
host). All devices of the sequence-parallel group execute the same program,
so simulating one of them is enough.

Forward, per chunk ``i``: QKV projection, Alltoall, cache ``k_i, v_i`` to
host, fetch ``kv_0 .. kv_{i-1}`` one by one and fold each into the running
attention output, offload ``q_i`` and the output, Alltoall back, output
projection, FFN.

Backward: FFN and output-projection backward per chunk, then the nested
loop with key/value chunk ``j`` outside and query chunk ``i >= j`` inside.
Each inner step fetches ``q_i, o_i, do_i``, even when block sparsity skips
the kernel; each outer step fetches ``k_j, v_j`` and the layer input ``h_j``
for the projection backward. In the forward only kept key/value chunks are
fetched.

With double buffering a fetch may start as soon as the buffer two fetches
back is released; without it the whole program runs in issue order.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

from .attention import SparsityPlan

STREAMS = ("compute", "htod", "dtoh")
OP_KINDS = ("attn_fwd", "attn_bwd", "a2a", "htod", "dtoh", "proj", "ffn")
ATTN_BWD_FLOP_RATIO = 2.5  # executed backward / forward flops, recompute included
ATTN_BWD_USEFUL_RATIO = 2.0


@dataclass(frozen=True)
class HardwareProfile:
    """Device and link constants. Defaults: A100-class node with 4 GPUs per PCIe host link."""

    peak_flops: float = 312e12
    flop_efficiency: float = 0.5   # calibration: achievable fraction for attention kernels
    nvlink_bw: float = 100e9
    pcie_bw: float = 32e9
    pcie_sharing: int = 4
    internode_bw: float = 25e9     # 200 Gb/s HDR InfiniBand
    devices_per_node: int = 4
    fixed_latency: float = 20e-6   # calibration: per-op launch overhead
    train_dtype_bytes: int = 2
    htod_strategy: str = "A"

    def __post_init__(self) -> None:
        for name in ("peak_flops", "nvlink_bw", "pcie_bw", "internode_bw"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.flop_efficiency <= 1:
            raise ValueError("flop_efficiency must lie in (0, 1]")
        if self.pcie_sharing < 1 or self.devices_per_node < 1 or self.train_dtype_bytes < 1:
            raise ValueError("pcie_sharing, devices_per_node and train_dtype_bytes must be >= 1")
        if self.fixed_latency < 0:
            raise ValueError("fixed_latency must be non-negative")
        if self.htod_strategy not in ("A", "B"):
            raise ValueError("htod_strategy is 'A' (every device fetches) or 'B' (fetch + scatter)")

    @property
    def compute_rate(self) -> float:
        return self.peak_flops * self.flop_efficiency

    def scaled(self, k: float) -> "HardwareProfile":
        """Every rate times ``k`` and the launch overhead divided by ``k``."""
        return replace(self, peak_flops=self.peak_flops * k, nvlink_bw=self.nvlink_bw * k,
                       pcie_bw=self.pcie_bw * k, internode_bw=self.internode_bw * k,
                       fixed_latency=self.fixed_latency / k)


@dataclass(frozen=True)
class SimModel:
    hidden: int = 4096
    heads: int = 32
    head_dim: int = 128
    ffn_dim: int = 16384
    batch: int = 1

    def __post_init__(self) -> None:
        if self.hidden != self.heads * self.head_dim:
            raise ValueError("hidden must equal heads * head_dim")


GPT_6P7B = SimModel(hidden=4096, heads=32, head_dim=128, ffn_dim=16384)


def attn_flops(b: int, s_q: int, s_kv: int, h_local: int, d: int, diagonal: bool = False) -> float:
    f = 4.0 * b * s_q * s_kv * h_local * d
    return f / 2 if diagonal else f


def op_latency(kind: str, profile: HardwareProfile, *, b: int = 1, s_q: int = 0, s_kv: int = 0,
               h_local: int = 0, d: int = 0, nbytes: float = 0.0, flops: float = 0.0,
               diagonal: bool = False, p: int = 1) -> float:
    """Seconds for one op; every op pays ``fixed_latency`` once.

    ``attn_fwd``/``attn_bwd`` take their flops from the shape; ``proj``/``ffn``
    take ``flops``; transfers take ``nbytes``.
    """
    lat = profile.fixed_latency
    if kind == "attn_fwd":
        return lat + attn_flops(b, s_q, s_kv, h_local, d, diagonal) / profile.compute_rate
    if kind == "attn_bwd":
        return lat + ATTN_BWD_FLOP_RATIO * attn_flops(b, s_q, s_kv, h_local, d, diagonal) / profile.compute_rate
    if kind in ("proj", "ffn"):
        return lat + flops / profile.compute_rate
    if kind == "a2a":
        dpn = profile.devices_per_node
        if p <= dpn:
            return lat + nbytes / profile.nvlink_bw
        intra = nbytes * dpn / p
        return lat + intra / profile.nvlink_bw + (nbytes - intra) / profile.internode_bw
    if kind == "dtoh":
        return lat + nbytes * profile.pcie_sharing / profile.pcie_bw
    if kind == "htod":
        sh = profile.pcie_sharing
        if profile.htod_strategy == "A":
            return lat + nbytes * sh / profile.pcie_bw
        # one device pulls the node's share over an unshared link, then scatters;
        # the scatter adds a barrier
        return 2 * lat + nbytes * sh / profile.pcie_bw + nbytes * (sh - 1) / profile.nvlink_bw
    raise ValueError(f"unknown op kind {kind!r}")


def _crossover_terms(profile: HardwareProfile, model: SimModel, p: int):
    hl = model.heads // p
    d = model.head_dim
    b = model.batch
    dt = profile.train_dtype_bytes
    # attention(s) = A s^2 + L, fetch(s) = B s + L + extra
    A = 2.0 * b * hl * d / profile.compute_rate
    sh = profile.pcie_sharing
    B = 3.0 * b * hl * d * dt * sh / profile.pcie_bw
    extra = 0.0
    if profile.htod_strategy == "B":
        B += 3.0 * b * hl * d * dt * (sh - 1) / profile.nvlink_bw
        extra = profile.fixed_latency
    return A, B, extra


def crossover_closed_form(profile: HardwareProfile, model: SimModel = GPT_6P7B, p: int = 4) -> float:
    """Real-valued chunk length where diagonal attention time equals its q/k/v fetch time."""
    A, B, extra = _crossover_terms(profile, model, p)
    return (B + math.sqrt(B * B + 4 * A * extra)) / (2 * A)


def crossover_scan(profile: HardwareProfile, model: SimModel = GPT_6P7B, p: int = 4,
                   max_log2: int = 40) -> int:
    hl = model.heads // p
    for e in range(max_log2 + 1):
        s = 2 ** e
        attn = op_latency("attn_fwd", profile, b=model.batch, s_q=s, s_kv=s, h_local=hl,
                          d=model.head_dim, diagonal=True)
        fetch = op_latency("htod", profile,
                           nbytes=3 * model.batch * s * hl * model.head_dim * profile.train_dtype_bytes)
        if attn >= fetch:
            return s
    raise ValueError("attention never overtakes the fetch below 2**max_log2 tokens")


def crossover_chunk_size(profile: HardwareProfile, model: SimModel = GPT_6P7B, p: int = 4) -> int:
    """Smallest power-of-two chunk whose diagonal attention outlasts fetching its q/k/v.

    Computed from the closed form and cross-checked against a scan of
    :func:`op_latency`.
    """
    s_star = crossover_closed_form(profile, model, p)
    closed = 1 if s_star <= 1 else 2 ** math.ceil(math.log2(s_star) - 1e-12)
    scanned = crossover_scan(profile, model, p)
    if closed != scanned:
        raise AssertionError(f"closed form gives {closed}, scan gives {scanned}")
    return closed


@dataclass(frozen=True)
class SchedulePlan:
    s_global: int
    u: int
    p: int = 4
    double_buffer: bool = True
    rho: float = 0.0
    pass_: str = "both"
    model: SimModel = GPT_6P7B
    sparsity_seed: int = 0

    def __post_init__(self) -> None:
        if self.pass_ not in ("fwd", "bwd", "both"):
            raise ValueError("pass_ must be 'fwd', 'bwd' or 'both'")
        if self.u < 1 or self.p < 1 or self.s_global % (self.u * self.p):
            raise ValueError(f"s_global={self.s_global} not divisible by u*p={self.u * self.p}")
        if self.model.heads % self.p:
            raise ValueError(f"heads={self.model.heads} not divisible by p={self.p}")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")

    @property
    def chunk(self) -> int:
        return self.s_global // self.u


@dataclass
class Event:
    name: str
    kind: str
    stream: str
    chunks: tuple[int, ...]
    duration: float
    deps: list[int] = field(default_factory=list)
    nbytes: float = 0.0
    flops: float = 0.0
    useful_flops: float = 0.0
    buffer_bytes: float = 0.0   # device buffer this op fills, live until `frees_at` ends
    frees_at: int | None = None
    t_start: float = math.nan
    t_end: float = math.nan


@dataclass
class Timeline:
    events: list[Event]
    makespan: float
    busy: dict[str, float]
    useful_flops: float
    mfu: float
    hbm_highwater: float
    plan: SchedulePlan | None = None

    def busy_fraction(self, stream: str) -> float:
        return self.busy[stream] / self.makespan if self.makespan else 0.0

    def summary(self) -> dict:
        return {"makespan_s": self.makespan, "mfu": self.mfu,
                "busy_s": dict(self.busy), "hbm_buffer_highwater_bytes": self.hbm_highwater,
                "n_events": len(self.events), "useful_flops": self.useful_flops}


class _Program:
    def __init__(self, serial: bool):
        self.events: list[Event] = []
        self.serial = serial

    def add(self, ev: Event, deps: Iterable[int | None] = ()) -> int:
        ev.deps = sorted({d for d in deps if d is not None})
        if self.serial and self.events:
            ev.deps = sorted(set(ev.deps) | {len(self.events) - 1})
        self.events.append(ev)
        return len(self.events) - 1


class _Buffers:
    """Round-robin pool of ``n`` fetch buffers; a fetch waits for the buffer's last reader."""

    def __init__(self, n: int):
        self.n = n
        self.last_reader: list[int | None] = []

    def gate(self) -> int | None:
        k = len(self.last_reader)
        return self.last_reader[k - self.n] if k >= self.n else None

    def claim(self, reader: int) -> None:
        self.last_reader.append(reader)


def build_program(plan: SchedulePlan, profile: HardwareProfile) -> list[Event]:
    m = plan.model
    p, u, b = plan.p, plan.u, m.batch
    c = plan.chunk
    cl = c // p
    hl = m.heads // p
    d = m.head_dim
    H = m.hidden
    dt = profile.train_dtype_bytes
    T = b * cl * H * dt            # one local chunk == one head-sharded chunk, bytes
    keep = (SparsityPlan.random(u, plan.rho, plan.sparsity_seed).keep if plan.rho > 0
            else SparsityPlan.dense(u).keep)
    # one chunk leaves nothing to overlap: the schedule runs in issue order
    prog = _Program(serial=not plan.double_buffer or u == 1)
    nbuf = 2 if plan.double_buffer else 1
    lat = profile.fixed_latency

    def comp(kind, name, chunks, flops, useful, deps, dur=None):
        if dur is None:
            dur = lat + flops / profile.compute_rate
        return prog.add(Event(name, kind, "compute", chunks, dur, flops=flops,
                              useful_flops=useful), deps)

    def xfer(kind, name, chunks, nbytes, deps, buffer=0.0):
        stream = "htod" if kind == "htod" else "dtoh"
        return prog.add(Event(name, kind, stream, chunks, op_latency(kind, profile, nbytes=nbytes),
                              nbytes=nbytes, buffer_bytes=buffer), deps)

    def a2a(name, chunks, nbytes, deps):
        return prog.add(Event(name, "a2a", "compute", chunks,
                              op_latency("a2a", profile, nbytes=nbytes, p=p), nbytes=nbytes), deps)

    proj_f = 2.0 * b * cl * H * 3 * H
    out_f = 2.0 * b * cl * H * H
    ffn_f = 4.0 * b * cl * H * m.ffn_dim

    kv_off: dict[int, int] = {}
    q_off: dict[int, int] = {}
    do_off: dict[int, int] = {}

    if plan.pass_ in ("fwd", "both"):
        kvbuf = _Buffers(nbuf)
        for i in range(u):
            pj = comp("proj", f"qkv_proj[{i}]", (i,), proj_f, proj_f, [])
            al = a2a(f"a2a_qkv[{i}]", (i,), 3 * T, [pj])
            kv_off[i] = xfer("dtoh", f"offload_kv[{i}]", (i,), 2 * T, [al])
            last = al
            for j in range(i + 1):
                if not keep[i, j]:
                    continue
                fl = attn_flops(b, c, c, hl, d, diagonal=(i == j))
                if j < i:
                    f = xfer("htod", f"fetch_kv[{j}->{i}]", (j, i), 2 * T,
                             [kv_off[j], kvbuf.gate()], buffer=2 * T)
                    last = comp("attn_fwd", f"attn_fwd[{i},{j}]", (i, j), fl, fl, [al, f, last])
                    kvbuf.claim(last)
                    prog.events[f].frees_at = last
                else:
                    last = comp("attn_fwd", f"attn_fwd[{i},{j}]", (i, j), fl, fl, [al, last])
            q_off[i] = xfer("dtoh", f"offload_q_o[{i}]", (i,), 2 * T, [last])
            back = a2a(f"a2a_out[{i}]", (i,), T, [last])
            op = comp("proj", f"out_proj[{i}]", (i,), out_f, out_f, [back])
            for n in range(2):
                op = comp("ffn", f"ffn[{2 * i + n}]", (i,), ffn_f / 2, ffn_f / 2, [op])

    if plan.pass_ in ("bwd", "both"):
        if not q_off:
            # backward alone: caches are assumed resident on the host already
            q_off = {i: None for i in range(u)}
            kv_off = {i: None for i in range(u)}
        prev = None
        for i in range(u):
            prev = comp("ffn", f"ffn_bwd[{i}]", (i,), 2 * ffn_f, 2 * ffn_f, [prev])
            prev = comp("proj", f"out_proj_bwd[{i}]", (i,), 2 * out_f, 2 * out_f, [prev])
            g = a2a(f"a2a_dout[{i}]", (i,), T, [prev])
            do_off[i] = xfer("dtoh", f"offload_do[{i}]", (i,), T, [g])
            prev = g
        kvbuf = _Buffers(nbuf)
        qbuf = _Buffers(nbuf)
        hbuf = _Buffers(nbuf)
        last = prev
        for j in range(u):
            fkv = xfer("htod", f"fetch_kv[{j}]", (j,), 2 * T, [kv_off[j], kvbuf.gate()],
                       buffer=2 * T)
            fh = xfer("htod", f"fetch_h[{j}]", (j,), T, [hbuf.gate()], buffer=T)
            for i in range(j, u):
                # the query side streams through every inner step; sparsity only
                # skips the kernel
                fq = xfer("htod", f"fetch_q_o_do[{i}|{j}]", (i, j), 3 * T,
                          [q_off[i], do_off[i], qbuf.gate()], buffer=3 * T)
                if not keep[i, j]:
                    qbuf.claim(fq)
                    continue
                fl = attn_flops(b, c, c, hl, d, diagonal=(i == j))
                last = comp("attn_bwd", f"attn_bwd[{i},{j}]", (i, j), ATTN_BWD_FLOP_RATIO * fl,
                            ATTN_BWD_USEFUL_RATIO * fl, [fkv, fq, last])
                qbuf.claim(last)
                prog.events[fq].frees_at = last
            kvbuf.claim(last)
            prog.events[fkv].frees_at = last
            g = a2a(f"a2a_grad[{j}]", (j,), 3 * T, [last])
            last = comp("proj", f"qkv_proj_bwd[{j}]", (j,), 2 * proj_f, 2 * proj_f, [g, fh])
            hbuf.claim(last)
            prog.events[fh].frees_at = last
    return prog.events


def run_events(events: Sequence[Event]) -> None:
    """Event loop: in-order streams, start when the stream is free and all deps ended.

    A priority queue orders completions by time; ties resolve in insertion
    order.
    """
    queues: dict[str, list[int]] = {s: [] for s in STREAMS}
    for idx, ev in enumerate(events):
        for dep in ev.deps:
            if dep >= idx:
                raise ValueError(f"event {idx} depends on later event {dep}")
        queues[ev.stream].append(idx)
    head = {s: 0 for s in STREAMS}
    busy_until = {s: 0.0 for s in STREAMS}
    running = {s: False for s in STREAMS}
    done = [False] * len(events)
    heap: list[tuple[float, int, int]] = []
    seq = 0
    now = 0.0

    def try_start():
        nonlocal seq
        for s in STREAMS:
            if running[s] or head[s] >= len(queues[s]):
                continue
            idx = queues[s][head[s]]
            ev = events[idx]
            if all(done[d] for d in ev.deps):
                start = max(now, busy_until[s], max((events[d].t_end for d in ev.deps), default=0.0))
                ev.t_start = start
                ev.t_end = start + ev.duration
                running[s] = True
                heapq.heappush(heap, (ev.t_end, seq, idx))
                seq += 1

    try_start()
    while heap:
        now, _, idx = heapq.heappop(heap)
        ev = events[idx]
        done[idx] = True
        running[ev.stream] = False
        busy_until[ev.stream] = ev.t_end
        head[ev.stream] += 1
        try_start()
    if not all(done):
        raise RuntimeError("deadlock: some events never became ready")


def validate_timeline(events: Sequence[Event], eps: float = 1e-12) -> list[str]:
    """Return violations: intra-stream overlap, broken dependency, bad durations."""
    problems = []
    by_stream: dict[str, list[Event]] = {}
    for idx, ev in enumerate(events):
        if not ev.t_end >= ev.t_start >= 0:
            problems.append(f"event {idx} {ev.name}: bad interval [{ev.t_start}, {ev.t_end}]")
        if abs((ev.t_end - ev.t_start) - ev.duration) > eps * max(1.0, ev.duration):
            problems.append(f"event {idx} {ev.name}: interval does not match duration")
        for d in ev.deps:
            if events[d].t_end > ev.t_start + eps:
                problems.append(f"event {idx} {ev.name} starts before dependency {events[d].name} ends")
        by_stream.setdefault(ev.stream, []).append(ev)
    for stream, evs in by_stream.items():
        evs = sorted(evs, key=lambda e: (e.t_start, e.t_end))
        for a, b in zip(evs, evs[1:]):
            if b.t_start < a.t_end - eps:
                problems.append(f"overlap on {stream}: {a.name} and {b.name}")
    return problems


def _hbm_highwater(events: Sequence[Event]) -> float:
    points = []
    for ev in events:
        if ev.buffer_bytes:
            end = events[ev.frees_at].t_end if ev.frees_at is not None else ev.t_end
            points.append((ev.t_start, 1, ev.buffer_bytes))
            points.append((end, 0, -ev.buffer_bytes))
    live = peak = 0.0
    for _, _, delta in sorted(points):
        live += delta
        peak = max(peak, live)
    return peak


def simulate(plan: SchedulePlan, profile: HardwareProfile | None = None) -> Timeline:
    profile = profile or HardwareProfile()
    events = build_program(plan, profile)
    run_events(events)
    makespan = max(ev.t_end for ev in events)
    busy = {s: sum(ev.duration for ev in events if ev.stream == s) for s in STREAMS}
    useful = sum(ev.useful_flops for ev in events)
    mfu = useful / (makespan * profile.peak_flops) if makespan > 0 else 0.0
    return Timeline(events=events, makespan=makespan, busy=busy, useful_flops=useful, mfu=mfu,
                    hbm_highwater=_hbm_highwater(events), plan=plan)


def serialized_makespan(tl: Timeline) -> float:
    return sum(ev.duration for ev in tl.events)


def compute_bound_makespan_bound(tl: Timeline, slack: float = 0.05) -> float:
    """Sum of compute plus the first fetch and the last drain, with relative slack."""
    comp = tl.busy["compute"]
    fetches = [e for e in tl.events if e.stream == "htod"]
    drains = [e for e in tl.events if e.stream == "dtoh"]
    first = fetches[0].duration if fetches else 0.0
    last = drains[-1].duration if drains else 0.0
    return (comp + first + last) * (1 + slack)


@dataclass
class SweepRow:
    chunk: int
    u: int
    mfu: float
    makespan: float
    peak_hbm_bytes: float
    buffer_highwater_bytes: float


def sweep_chunk_size(cfg, profile: HardwareProfile | None, sizes: Sequence[int],
                     double_buffer: bool = True, rho: float = 0.0) -> tuple[list[SweepRow], int]:
    """Simulate each chunk size and pair it with the memory model's peak.

    ``cfg`` is a :class:`fpdt.memory.TrainConfig`; its ``u_attn`` is replaced
    per row. Returns the rows and the chunk size with the highest MFU.
    """
    from .memory import activation_peak

    profile = profile or HardwareProfile()
    mdl = cfg.model
    sim_model = SimModel(hidden=mdl.hidden, heads=mdl.heads, head_dim=mdl.head_dim,
                         ffn_dim=mdl.ffn_dim, batch=cfg.batch)
    rows = []
    for size in sizes:
        if cfg.s_global % size:
            raise ValueError(f"chunk size {size} does not divide s_global={cfg.s_global}")
        u = cfg.s_global // size
        tl = simulate(SchedulePlan(s_global=cfg.s_global, u=u, p=cfg.p,
                                   double_buffer=double_buffer, rho=rho, model=sim_model),
                      profile)
        mem = activation_peak(cfg.with_(u_attn=u, offload=True))
        rows.append(SweepRow(size, u, tl.mfu, tl.makespan, mem.peak_activation_bytes,
                             tl.hbm_highwater))
    best = max(rows, key=lambda r: r.mfu).chunk
    return rows, best


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(asdict(rows[0])), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(asdict(r))
    return buf.getvalue()


def to_chrome_trace(tl: Timeline, p: int | None = None) -> dict:
    """Chrome trace-event JSON: one pid per simulated device, one tid per stream."""
    p = p or (tl.plan.p if tl.plan else 1)
    trace = []
    for dev in range(p):
        trace.append({"name": "process_name", "ph": "M", "pid": dev, "tid": 0,
                      "args": {"name": f"device {dev}"}})
        for tid, s in enumerate(STREAMS):
            trace.append({"name": "thread_name", "ph": "M", "pid": dev, "tid": tid,
                          "args": {"name": s}})
        for ev in tl.events:
            trace.append({"name": ev.name, "cat": ev.kind, "ph": "X", "pid": dev,
                          "tid": STREAMS.index(ev.stream), "ts": ev.t_start * 1e6,
                          "dur": ev.duration * 1e6,
                          "args": {"bytes": ev.nbytes, "flops": ev.flops,
                                   "chunks": list(ev.chunks)}})
    return {"traceEvents": trace, "displayTimeUnit": "ms"}


def write_chrome_trace(tl: Timeline, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_chrome_trace(tl), fh)
