"""Command-line front end.

Subcommands: validate, run, sweep, compare, trace-gen, schedule-dump.
Exit codes: 0 success, 1 runtime/config error (with a diagnostic on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from .attention import (
    ScoreGen,
    TraceError,
    count_rescales,
    generate_scores,
    read_trace,
    write_trace,
)
from .config import (
    ConfigError,
    default_config,
    derive_energy_table,
    find_config,
    load_config,
    validate_config,
)
from .costs import ABLATIONS, CostModelError
from .pipeline import SimError, simulate_system
from .report import (
    DEFAULT_SEQ_LENS,
    DESIGNS,
    ExperimentPlan,
    PlanError,
    ReportRow,
    emit_report,
    run_experiment,
)
from .scheduler import ScheduleError, build_inter_tile_schedule
from .workload import WorkloadError, derive_workload

_ERRORS = (ConfigError, WorkloadError, ScheduleError, SimError, CostModelError,
           PlanError, TraceError, OSError, ValueError)


def _load(name: str):
    return load_config(find_config(name))


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="default",
                   help="config name or path (searched in $FUSIONCIM_CONFIG_DIR, "
                        "then the packaged configs)")


def _cmd_validate(args) -> int:
    model, arch = _load(args.config)
    report = validate_config(model, arch)
    if report.ok:
        print("config ok: 0 violations")
        return 0
    for v in report.violations:
        print(f"violation [{v.code}]: {v.message}", file=sys.stderr)
    return 1


def _cmd_run(args) -> int:
    model, arch = _load(args.config)
    rep = validate_config(model, arch)
    if not rep.ok:
        raise ConfigError(f"invalid config: {[v.code for v in rep.violations]}")
    workload = derive_workload(model, args.phase, args.seq_len, args.decode_parallel)
    table = derive_energy_table(arch)

    if args.trace:
        scores, causal = read_trace(args.trace)
        if scores.shape != (workload.q_rows, workload.seq_len):
            raise TraceError(
                f"trace shape {scores.shape} does not match workload "
                f"({workload.q_rows}, {workload.seq_len})")
        scores = scores.astype(np.float64)
        mode = "trace"
    else:
        gen = ScoreGen(mode=model.positional_mode, seed=args.seed)
        scores = generate_scores(gen, workload.q_rows, workload.seq_len,
                                 causal=workload.causal)
        mode = model.positional_mode

    order = args.order if args.design == "fusioncim" else "forward"
    counts = {
        o: int(count_rescales(scores, o, causal=workload.causal).sum()) * model.num_q_heads
        for o in ("forward", "reverse")
    }
    res = simulate_system(workload, arch, design=args.design, energy_table=table,
                          rescale_total=counts[order])
    reduction = 0.0
    if counts["forward"] > 0:
        reduction = min(1.0, max(0.0, 1.0 - counts[order] / counts["forward"]))

    print(f"design={res.design} seq_len={args.seq_len} phase={args.phase} "
          f"order={order} positional_mode={mode}")
    print(f"cycles={res.cycles} wall_ms={res.wall_time_s * 1e3:.4f} "
          f"stall_cycles={res.stall_cycles}")
    print(f"offchip_bytes={res.counters.offchip.total()} "
          f"onchip_bytes={res.counters.onchip.total()}")
    print(f"total_energy_j={res.energy.total:.6e}")
    print(f"rescale_count={counts[order]} rescale_reduction_vs_forward={reduction:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    model, arch = _load(args.config)
    rep = validate_config(model, arch)
    if not rep.ok:
        raise ConfigError(f"invalid config: {[v.code for v in rep.violations]}")
    plan = ExperimentPlan(
        seq_lens=tuple(args.seq_lens),
        designs=tuple(args.designs),
        order=args.order,
        score_seed=args.seed,
        phase=args.phase,
        ablations=tuple(args.ablate),
        positional_modes=tuple(args.positional_modes) if args.positional_modes else None,
        jobs=args.jobs,
    )
    rows = run_experiment(plan, model, arch)
    emit_report(rows, args.format, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_compare(args) -> int:
    model, arch = _load(args.config)
    plan = ExperimentPlan(seq_lens=(args.seq_len,), designs=DESIGNS,
                          order=args.order, score_seed=args.seed, phase=args.phase)
    rows = run_experiment(plan, model, arch)
    hdr = f"{'design':<12} {'cycles':>12} {'norm_lat':>9} {'norm_energy':>12} " \
          f"{'offchip_B':>14} {'onchip_B':>14}"
    print(hdr)
    for r in rows:
        print(f"{r.design:<12} {r.cycles:>12} {r.normalized_latency:>9.4f} "
              f"{r.normalized_energy:>12.4f} {r.offchip_bytes:>14} {r.onchip_bytes:>14}")
    return 0


def _cmd_trace_gen(args) -> int:
    gen = ScoreGen(mode=args.mode, seed=args.seed, noise_std=args.noise_std,
                   alibi_slope=args.alibi_slope, locality_scale=args.locality_scale,
                   tau=args.tau)
    scores = generate_scores(gen, args.rows, args.cols, causal=args.causal)
    write_trace(args.out, scores, causal=args.causal)
    print(f"wrote {args.rows}x{args.cols} trace to {args.out}")
    return 0


def _cmd_schedule_dump(args) -> int:
    schedule = build_inter_tile_schedule(args.qtiles, args.hes, causal=args.causal)
    doc = {
        "n_hes": schedule.n_hes,
        "causal": schedule.causal,
        "broadcast_events": schedule.num_broadcast_events,
        "waves": [
            {
                "length": w.length,
                "assignments": {str(he): {"q_tile": u.q_tile, "tiles": list(u.tiles)}
                                for he, u in sorted(w.assignments.items())},
                "steps": [{"step": s.step, "kv_tile": s.kv_tile,
                           "dests": sorted(s.dests)} for s in w.steps],
            }
            for w in schedule.waves
        ],
    }
    text = json.dumps(doc, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(f"wrote schedule to {args.out}")
    else:
        print(text)
    return 0


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def _str_list(text: str) -> list[str]:
    return [tok for tok in text.split(",") if tok]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusioncim",
                                description="Hybrid CIM attention accelerator model")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="validate a config file")
    _add_config_arg(v)
    v.set_defaults(fn=_cmd_validate)

    r = sub.add_parser("run", help="simulate one design point")
    _add_config_arg(r)
    r.add_argument("--design", choices=DESIGNS, default="fusioncim")
    r.add_argument("--seq-len", type=int, required=True)
    r.add_argument("--phase", choices=("prefill", "decode"), default="prefill")
    r.add_argument("--decode-parallel", type=int, default=1)
    r.add_argument("--order", choices=("forward", "reverse"), default="reverse")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--trace", default=None, help="score trace file to ingest")
    r.set_defaults(fn=_cmd_run)

    s = sub.add_parser("sweep", help="run an experiment plan and emit a report")
    _add_config_arg(s)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--seq-lens", type=_int_list, default=list(DEFAULT_SEQ_LENS))
    s.add_argument("--designs", type=_str_list, default=list(DESIGNS))
    s.add_argument("--order", choices=("forward", "reverse"), default="reverse")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--phase", choices=("prefill", "decode"), default="prefill")
    s.add_argument("--ablate", type=_str_list, default=[],
                   help=f"comma-separated subset of {ABLATIONS}")
    s.add_argument("--positional-modes", type=_str_list, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=_cmd_sweep)

    c = sub.add_parser("compare", help="print the normalized design comparison")
    _add_config_arg(c)
    c.add_argument("--seq-len", type=int, default=4096)
    c.add_argument("--order", choices=("forward", "reverse"), default="reverse")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--phase", choices=("prefill", "decode"), default="prefill")
    c.set_defaults(fn=_cmd_compare)

    t = sub.add_parser("trace-gen", help="generate a synthetic score trace file")
    t.add_argument("--mode", choices=("uniform", "alibi_like", "rope_like"),
                   default="uniform")
    t.add_argument("--rows", type=int, required=True)
    t.add_argument("--cols", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--causal", action="store_true")
    t.add_argument("--noise-std", type=float, default=1.0)
    t.add_argument("--alibi-slope", type=float, default=4.0)
    t.add_argument("--locality-scale", type=float, default=2.0)
    t.add_argument("--tau", type=float, default=64.0)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=_cmd_trace_gen)

    d = sub.add_parser("schedule-dump", help="dump a broadcast schedule for debugging")
    d.add_argument("--qtiles", type=int, required=True)
    d.add_argument("--hes", type=int, required=True)
    d.add_argument("--causal", action="store_true", default=True)
    d.add_argument("--non-causal", dest="causal", action="store_false")
    d.add_argument("--out", default=None)
    d.set_defaults(fn=_cmd_schedule_dump)
    return p


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
