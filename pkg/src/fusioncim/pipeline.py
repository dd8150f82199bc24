"""Two-level pipeline timing: event-driven engine model, closed forms, system roll-up.

An engine runs a three-stage pipeline (score, softmax, context) whose stages
all take ``bit_serial_width`` cycles per KV vector: the 8-bit operands are
processed one bit per cycle, and the softmax exponential is an 8-step Taylor
iteration pinned to the same latency so the stages stay aligned.  A query
tile is written into the score array once, then KV vectors stream through;
in steady state one vector completes every 8 cycles, the first vector after
a fill of two stage latencies.

Partial tiles occupy the pipeline as if full (the slot timing is per tile),
but byte and op counters always use real vector counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable

from .config import ArchConfig, EnergyTable, OPS_PER_MAC
from .scheduler import BroadcastSchedule, build_system_schedule
from .workload import WorkloadSpec

# Ops charged to the softmax unit per exponential evaluation: eight Taylor
# multiply-accumulates (16 ops) plus the max-subtract and the LUT multiply.
SFU_OPS_PER_EXP = 18


class SimError(Exception):
    pass


@dataclass
class OffchipBytes:
    q_in: int = 0
    k_in: int = 0
    v_in: int = 0
    o_out: int = 0
    score_rw: int = 0

    def total(self) -> int:
        return self.q_in + self.k_in + self.v_in + self.o_out + self.score_rw


@dataclass
class OnchipBytes:
    """On-chip movement by category.

    ``gb_read`` is global-buffer traffic (multicast tile reads count once per
    broadcast step, not per destination).  ``cim_read`` is operand ingestion
    at destination engines (the per-engine KV staging buffer feeding the
    array).  ``q_cim_write`` is split from ``kv_cim_write`` because the
    KV-write counter must stay exactly zero for the fused streaming dataflow
    while query loading is still a real array write.
    """

    kv_cim_write: int = 0
    q_cim_write: int = 0
    transpose_rw: int = 0
    psum_move: int = 0
    gb_read: int = 0
    cim_read: int = 0

    def total(self) -> int:
        return (self.kv_cim_write + self.q_cim_write + self.transpose_rw
                + self.psum_move + self.gb_read + self.cim_read)


@dataclass
class OpCounts:
    """Op counters; one multiply-accumulate counts as OPS_PER_MAC ops."""

    mac_ip: int = 0
    mac_op: int = 0
    sfu: int = 0


@dataclass
class EventCounters:
    offchip: OffchipBytes = field(default_factory=OffchipBytes)
    onchip: OnchipBytes = field(default_factory=OnchipBytes)
    ops: OpCounts = field(default_factory=OpCounts)
    rescale_count: int = 0

    def add(self, other: "EventCounters") -> "EventCounters":
        out = EventCounters()
        for group in ("offchip", "onchip", "ops"):
            a, b, o = getattr(self, group), getattr(other, group), getattr(out, group)
            for f in fields(a):
                setattr(o, f.name, getattr(a, f.name) + getattr(b, f.name))
        out.rescale_count = self.rescale_count + other.rescale_count
        return out

    def scaled(self, c: float) -> "EventCounters":
        out = EventCounters()
        for group in ("offchip", "onchip", "ops"):
            a, o = getattr(self, group), getattr(out, group)
            for f in fields(a):
                setattr(o, f.name, getattr(a, f.name) * c)
        out.rescale_count = self.rescale_count * c
        return out


@dataclass(frozen=True)
class EnergyBreakdown:
    dram: float
    gb: float
    cim_read: float
    cim_write: float
    mac_ip: float
    mac_op: float
    sfu: float

    @property
    def total(self) -> float:
        return (self.dram + self.gb + self.cim_read + self.cim_write
                + self.mac_ip + self.mac_op + self.sfu)


@dataclass(frozen=True)
class PipelineParams:
    """Engine timing parameters; the single stage latency encodes the
    alignment requirement across the three stages."""

    stage_latency: int = 8
    stages: int = 3
    cim_write_cycles_per_row: int = 1
    head_dim: int = 128

    @property
    def fill_cycles(self) -> int:
        return (self.stages - 1) * self.stage_latency

    @classmethod
    def from_arch(cls, arch: ArchConfig, head_dim: int) -> "PipelineParams":
        return cls(stage_latency=arch.bit_serial_width,
                   cim_write_cycles_per_row=arch.cim_write_cycles_per_row,
                   head_dim=head_dim)


@dataclass(frozen=True)
class TileJob:
    vectors_real: int
    vectors_padded: int

    def __post_init__(self):
        if self.vectors_real > self.vectors_padded:
            raise SimError("real vector count cannot exceed the padded slot size")


@dataclass(frozen=True)
class QTileJob:
    q_rows: int
    tiles: tuple[TileJob, ...]

    def q_load_cycles(self, params: PipelineParams) -> int:
        return self.q_rows * params.cim_write_cycles_per_row


@dataclass
class SimResult:
    design: str
    cycles: int
    wall_time_s: float
    counters: EventCounters
    energy: EnergyBreakdown | None = None
    stall_cycles: int = 0


def simulate_engine(stream: Iterable[QTileJob], params: PipelineParams,
                    trace: list | None = None) -> tuple[int, EventCounters]:
    """Event-driven walk of one engine's pipeline.

    Returns total cycles and the engine-local counters (single-destination
    view: one global-buffer vector read per KV vector; multicast sharing is
    applied at the system level).  ``trace`` optionally collects
    (cycle, stage, tile, vector) occupancy tuples.
    """
    stream = list(stream)
    counters = EventCounters()
    L = params.stage_latency
    d = params.head_dim
    ip_free = sm_free = pv_free = 0
    last_done = 0
    for job in stream:
        q_load = job.q_load_cycles(params)
        # The Q write occupies the score array; downstream stages keep draining.
        ip_free = ip_free + q_load
        counters.onchip.gb_read += job.q_rows * d
        counters.onchip.q_cim_write += job.q_rows * d
        for t_idx, tile in enumerate(job.tiles):
            for v_idx in range(tile.vectors_padded):
                ip_start = ip_free
                ip_done = ip_start + L
                sm_start = max(ip_done, sm_free)
                sm_done = sm_start + L
                pv_start = max(sm_done, pv_free)
                pv_done = pv_start + L
                ip_free, sm_free, pv_free = ip_done, sm_done, pv_done
                last_done = max(last_done, pv_done)
                if trace is not None:
                    trace.append((ip_start, "score", t_idx, v_idx))
                    trace.append((sm_start, "softmax", t_idx, v_idx))
                    trace.append((pv_start, "context", t_idx, v_idx))
                if v_idx < tile.vectors_real:
                    counters.onchip.gb_read += 2 * d
                    counters.onchip.cim_read += 2 * d
                    counters.ops.mac_ip += OPS_PER_MAC * job.q_rows * d
                    counters.ops.mac_op += OPS_PER_MAC * job.q_rows * d
                    counters.ops.sfu += job.q_rows * SFU_OPS_PER_EXP
    cycles = max(last_done, ip_free)
    return cycles, counters


def closed_form_engine_cycles(stream: Iterable[QTileJob], params: PipelineParams) -> int:
    """Closed form matching simulate_engine exactly.

    The score stage issues one vector per stage latency, so the last vector
    leaves the pipeline two stage latencies after it leaves the score stage:
    cycles = sum over query tiles of (q_load + L * padded vectors), plus one
    pipeline fill measured from the last real slot (a trailing Q load with no
    vectors can outlast the drain).
    """
    running = 0
    last_exit = 0
    for job in stream:
        running += job.q_load_cycles(params)
        for tile in job.tiles:
            running += params.stage_latency * tile.vectors_padded
            if tile.vectors_padded > 0:
                last_exit = running + params.fill_cycles
    return max(running, last_exit)


def he_streams(schedule: BroadcastSchedule, workload: WorkloadSpec) -> dict[int, list[QTileJob]]:
    """Per-engine work streams implied by a broadcast schedule."""
    streams: dict[int, list[QTileJob]] = {}
    for he, units in schedule.he_units().items():
        jobs = []
        for unit in units:
            tiles = tuple(
                TileJob(workload.kv_tile_vectors(t), workload.tile) for t in unit.tiles
            )
            jobs.append(QTileJob(q_rows=workload.q_tile_rows(unit.q_tile), tiles=tiles))
        streams[he] = jobs
    return streams


def _fusioncim_system_cycles(workload: WorkloadSpec, arch: ArchConfig,
                             schedule: BroadcastSchedule) -> int:
    """System makespan: per-engine closed form plus the first-wave stagger
    offset (later waves overlap, an engine starts its next unit as soon as
    its pipeline frees up)."""
    params = PipelineParams.from_arch(arch, workload.head_dim)
    step_cycles = params.stage_latency * workload.tile
    streams = he_streams(schedule, workload)
    best = 0
    wave0 = schedule.waves[0] if schedule.waves else None
    for he, jobs in streams.items():
        if not jobs:
            continue
        offset = wave0.offset(he) if wave0 and he in wave0.assignments else 0
        best = max(best, offset * step_cycles + closed_form_engine_cycles(jobs, params))
    return best


def closed_form_cycles(workload: WorkloadSpec, arch: ArchConfig, design: str,
                       schedule: BroadcastSchedule | None = None, spec=None) -> int:
    """Analytic cycle count for a design over a full layer."""
    if design == "fusioncim":
        if schedule is None:
            schedule = build_system_schedule(workload, arch.num_hes)
        return _fusioncim_system_cycles(workload, arch, schedule)
    if design in ("baseline1", "baseline2"):
        from . import costs  # local import: costs builds on this module

        bspec = spec if spec is not None else costs.BaselineSpec(kind=design)
        return costs.baseline_cycles(workload, arch, bspec)
    raise SimError(f"unsupported design {design!r}")


def _apply_stall(cycles: int, counters: EventCounters, arch: ArchConfig) -> tuple[int, int]:
    bpc = arch.dram_bytes_per_cycle()
    if bpc <= 0:
        raise SimError("DRAM bandwidth must be positive")
    if math.isinf(bpc):
        return cycles, 0
    # Prefetch overlaps transfers with compute; only the demand the link
    # cannot sustain during compute shows up as stall cycles.
    stall = max(0, math.ceil(counters.offchip.total() / bpc - cycles))
    return cycles + stall, stall


def simulate_system(
    workload: WorkloadSpec,
    arch: ArchConfig,
    schedule: BroadcastSchedule | None = None,
    design: str = "fusioncim",
    energy_table: EnergyTable | None = None,
    rescale_total: int = 0,
    spec=None,
) -> SimResult:
    """Full-layer simulation for one design.

    ``rescale_total`` is the measured (or proxied) number of online-softmax
    rescaling events for the traversal order the design uses; it feeds the
    softmax-unit op count and the rescale counter.
    """
    from . import costs

    if design == "fusioncim":
        if schedule is None:
            schedule = build_system_schedule(workload, arch.num_hes)
        cycles = _fusioncim_system_cycles(workload, arch, schedule)
        counters = costs.model_fusioncim_access(workload, arch, schedule,
                                                rescale_total=rescale_total)
        result = SimResult(design="fusioncim", cycles=cycles, wall_time_s=0.0,
                           counters=counters)
    elif design == "baseline1":
        bspec = spec if spec is not None else costs.BaselineSpec(kind="baseline1")
        result = costs.model_baseline1(workload, arch, bspec, rescale_total=rescale_total)
    elif design == "baseline2":
        bspec = spec if spec is not None else costs.BaselineSpec(kind="baseline2")
        result = costs.model_baseline2(workload, arch, bspec, rescale_total=rescale_total)
    else:
        raise SimError(f"unsupported design {design!r}")

    cycles, stall = _apply_stall(result.cycles, result.counters, arch)
    result.cycles = cycles
    result.stall_cycles = stall
    result.wall_time_s = cycles / arch.freq_hz
    if energy_table is not None:
        result.energy = costs.energy_from_counters(result.counters, energy_table)
    return result
