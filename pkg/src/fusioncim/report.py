"""Experiment plans, sweep execution, and CSV/JSON report emission.

The CSV header is a stability contract (the plotting side consumes files,
not Python objects): columns, their order, and their types only change with
a package version bump.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import ScoreGen, count_rescales, generate_scores
from .config import ArchConfig, ModelConfig, derive_energy_table
from .costs import ABLATIONS, model_fusioncim_access, energy_from_counters
from .pipeline import simulate_system
from .scheduler import build_system_schedule
from .workload import derive_workload

DEFAULT_SEQ_LENS = (256, 512, 1024, 2048, 4096)
DESIGNS = ("baseline1", "baseline2", "fusioncim")

CSV_COLUMNS = (
    "design", "seq_len", "order", "positional_mode", "ablate",
    "cycles", "wall_ms", "normalized_latency",
    "total_energy_j", "normalized_energy",
    "offchip_bytes", "onchip_bytes",
    "onchip_kv_cim_write", "onchip_q_cim_write", "onchip_transpose_rw",
    "onchip_psum_move", "onchip_gb_read", "onchip_cim_read",
    "rescale_count", "rescale_reduction_vs_forward",
)

_INT_COLUMNS = {
    "seq_len", "cycles", "offchip_bytes", "onchip_bytes", "onchip_kv_cim_write",
    "onchip_q_cim_write", "onchip_transpose_rw", "onchip_psum_move",
    "onchip_gb_read", "onchip_cim_read", "rescale_count",
}
_FLOAT_COLUMNS = {
    "wall_ms", "normalized_latency", "total_energy_j", "normalized_energy",
    "rescale_reduction_vs_forward",
}


class PlanError(Exception):
    pass


@dataclass(frozen=True)
class ReportRow:
    design: str
    seq_len: int
    order: str
    positional_mode: str
    ablate: str
    cycles: int
    wall_ms: float
    normalized_latency: float
    total_energy_j: float
    normalized_energy: float
    offchip_bytes: int
    onchip_bytes: int
    onchip_kv_cim_write: int
    onchip_q_cim_write: int
    onchip_transpose_rw: int
    onchip_psum_move: int
    onchip_gb_read: int
    onchip_cim_read: int
    rescale_count: int
    rescale_reduction_vs_forward: float

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in CSV_COLUMNS}


@dataclass(frozen=True)
class ExperimentPlan:
    seq_lens: tuple[int, ...] = DEFAULT_SEQ_LENS
    designs: tuple[str, ...] = DESIGNS
    order: str = "reverse"          # fused-design traversal; references run forward
    score_seed: int = 0
    phase: str = "prefill"
    decode_parallel: int = 1
    ablations: tuple[str, ...] = ()  # extra fused-design rows, one per toggle
    positional_modes: tuple[str, ...] | None = None  # None: the model's mode
    jobs: int = 1

    def check(self) -> None:
        if not self.designs:
            raise PlanError("plan has no designs")
        for d in self.designs:
            if d not in DESIGNS:
                raise PlanError(f"unknown design {d!r}")
        if "baseline1" not in self.designs:
            raise PlanError("baseline1 must be present for normalization")
        if self.order not in ("forward", "reverse"):
            raise PlanError(f"unknown traversal order {self.order!r}")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise PlanError(f"unknown ablation {a!r}")
        if not self.seq_lens:
            raise PlanError("plan has no sequence lengths")


def _rescale_counts(model: ModelConfig, positional_mode: str, seq_len: int,
                    q_rows: int, causal: bool, seed: int) -> dict[str, int]:
    """Layer-level rescaling totals per traversal order.

    One representative head's score matrix is generated and counted; heads
    are statistically interchangeable under the synthetic proxies, so the
    layer total is the per-head count times the number of query heads.
    """
    if positional_mode == "trace":
        raise PlanError("sweeps need a generator positional mode; ingest traces via `run --trace`")
    gen = ScoreGen(mode=positional_mode, seed=seed)
    scores = generate_scores(gen, q_rows, seq_len, causal=causal)
    out = {}
    for order in ("forward", "reverse"):
        per_head = int(count_rescales(scores, order, causal=causal).sum())
        out[order] = per_head * model.num_q_heads
    return out


def _reduction(rescales: int, forward: int) -> float:
    if forward <= 0:
        return 0.0
    return min(1.0, max(0.0, 1.0 - rescales / forward))


def _point_rows(model: ModelConfig, arch: ArchConfig, plan: ExperimentPlan,
                seq_len: int, positional_mode: str) -> list[ReportRow]:
    table = derive_energy_table(arch)
    workload = derive_workload(model, plan.phase, seq_len, plan.decode_parallel)
    counts = _rescale_counts(model, positional_mode, seq_len, workload.q_rows,
                             workload.causal, plan.score_seed)
    schedule = build_system_schedule(workload, arch.num_hes)

    results = {}
    for design in plan.designs:
        order = plan.order if design == "fusioncim" else "forward"
        results[design] = (order, simulate_system(
            workload, arch, schedule=schedule if design == "fusioncim" else None,
            design=design, energy_table=table, rescale_total=counts[order]))

    base_order, base = results["baseline1"]
    rows = []
    for design in sorted(plan.designs):
        order, res = results[design]
        rows.append(_mk_row(res, seq_len, order, positional_mode, "none",
                            res.cycles / base.cycles,
                            res.energy.total / base.energy.total,
                            counts[order], _reduction(counts[order], counts["forward"])))
    if "fusioncim" in plan.designs:
        fus_order, fus = results["fusioncim"]
        for ablation in plan.ablations:
            counters = model_fusioncim_access(workload, arch, schedule,
                                              rescale_total=counts[fus_order],
                                              ablate=(ablation,))
            energy = energy_from_counters(counters, table)
            rows.append(ReportRow(
                design="fusioncim", seq_len=seq_len, order=fus_order,
                positional_mode=positional_mode, ablate=ablation,
                cycles=fus.cycles, wall_ms=fus.wall_time_s * 1e3,
                normalized_latency=fus.cycles / base.cycles,
                total_energy_j=energy.total,
                normalized_energy=energy.total / base.energy.total,
                offchip_bytes=counters.offchip.total(),
                onchip_bytes=counters.onchip.total(),
                onchip_kv_cim_write=counters.onchip.kv_cim_write,
                onchip_q_cim_write=counters.onchip.q_cim_write,
                onchip_transpose_rw=counters.onchip.transpose_rw,
                onchip_psum_move=counters.onchip.psum_move,
                onchip_gb_read=counters.onchip.gb_read,
                onchip_cim_read=counters.onchip.cim_read,
                rescale_count=counters.rescale_count,
                rescale_reduction_vs_forward=_reduction(counts[fus_order], counts["forward"]),
            ))
    return rows


def _mk_row(res, seq_len, order, positional_mode, ablate, norm_lat, norm_en,
            rescales, reduction) -> ReportRow:
    return ReportRow(
        design=res.design, seq_len=seq_len, order=order,
        positional_mode=positional_mode, ablate=ablate,
        cycles=res.cycles, wall_ms=res.wall_time_s * 1e3,
        normalized_latency=norm_lat,
        total_energy_j=res.energy.total, normalized_energy=norm_en,
        offchip_bytes=res.counters.offchip.total(),
        onchip_bytes=res.counters.onchip.total(),
        onchip_kv_cim_write=res.counters.onchip.kv_cim_write,
        onchip_q_cim_write=res.counters.onchip.q_cim_write,
        onchip_transpose_rw=res.counters.onchip.transpose_rw,
        onchip_psum_move=res.counters.onchip.psum_move,
        onchip_gb_read=res.counters.onchip.gb_read,
        onchip_cim_read=res.counters.onchip.cim_read,
        rescale_count=rescales,
        rescale_reduction_vs_forward=reduction,
    )


def run_experiment(plan: ExperimentPlan, model: ModelConfig, arch: ArchConfig) -> list[ReportRow]:
    """Execute a plan; deterministic given its seeds, rows sorted by
    (seq_len, design).  Points run concurrently up to ``plan.jobs``; assembly
    is order-stable regardless."""
    plan.check()
    modes = plan.positional_modes or (model.positional_mode,)
    points = [(n, mode) for n in sorted(plan.seq_lens) for mode in modes]

    def one(point):
        n, mode = point
        return _point_rows(model, arch, plan, n, mode)

    if plan.jobs > 1:
        with ThreadPoolExecutor(max_workers=plan.jobs) as pool:
            chunks = list(pool.map(one, points))
    else:
        chunks = [one(p) for p in points]
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r.seq_len, r.design, r.ablate, r.positional_mode))
    return rows


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(rows: list[ReportRow], fmt: str, path: str | Path) -> None:
    """Write rows as CSV (fixed header) or JSON (array of objects)."""
    if not rows:
        raise PlanError("refusing to emit an empty report")
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in rows:
                writer.writerow([_format_cell(getattr(row, c)) for c in CSV_COLUMNS])
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump([row.as_dict() for row in rows], fh, indent=1)
            fh.write("\n")
    else:
        raise PlanError(f"unknown report format {fmt!r}")


def read_report(path: str | Path) -> list[ReportRow]:
    """Parse a report back (CSV or JSON by extension); inverse of emit_report."""
    path = Path(path)
    if path.suffix == ".json":
        records = json.loads(path.read_text())
    else:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != list(CSV_COLUMNS):
                raise PlanError(f"unexpected CSV header in {path}")
            records = list(reader)
    rows = []
    for rec in records:
        kwargs = {}
        for col in CSV_COLUMNS:
            raw = rec[col]
            if col in _INT_COLUMNS:
                kwargs[col] = int(raw)
            elif col in _FLOAT_COLUMNS:
                kwargs[col] = float(raw)
            else:
                kwargs[col] = str(raw)
        rows.append(ReportRow(**kwargs))
    return rows
