#!/usr/bin/env python3
"""Render the five standard report figures from a sweep CSV.

Reads only the documented report columns; no in-process coupling to the
simulator.  Usage:

    python plots.py --fig fig6 --in results.csv --out fig6.png

Output format follows the file extension (.png or .svg).  Renders are
deterministic: the same CSV bytes produce the same image bytes.

Figures:
    fig6   normalized latency per design across sequence lengths
    fig7   normalized energy per design across sequence lengths
    fig8   normalized off-chip traffic, reference design 1 vs fused
    fig9   normalized on-chip traffic vs reference design 2, with the
           kv-stream / transpose / psum ablations (needs ablation rows,
           e.g. from `fusioncim sweep --ablate kv-stream,transpose,psum`)
    fig10  rescaling reduction vs forward traversal per score proxy
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
# Stable ids inside SVG output: identical inputs must give identical bytes.
matplotlib.rcParams["svg.hashsalt"] = "fusioncim-plots"

import matplotlib.pyplot as plt
import pandas as pd

DESIGN_ORDER = ("baseline1", "baseline2", "fusioncim")
ABLATION_ORDER = ("none", "kv-stream", "transpose", "psum")

BASE_COLUMNS = ("design", "seq_len", "order", "positional_mode", "ablate")


class PlotError(Exception):
    pass


@dataclass(frozen=True)
class FigureSpec:
    figure_id: str
    input_csv: str | Path
    output_path: str | Path
    title: str = ""
    grouping: tuple[str, ...] = ()


FIGURE_COLUMNS: dict[str, tuple[str, ...]] = {
    "fig6": BASE_COLUMNS + ("normalized_latency",),
    "fig7": BASE_COLUMNS + ("normalized_energy",),
    "fig8": BASE_COLUMNS + ("offchip_bytes",),
    "fig9": BASE_COLUMNS + ("onchip_bytes",),
    "fig10": BASE_COLUMNS + ("rescale_reduction_vs_forward",),
}

FIGURE_TITLES = {
    "fig6": "Normalized latency (baseline1 = 1.0)",
    "fig7": "Normalized energy (baseline1 = 1.0)",
    "fig8": "Normalized off-chip access (baseline1 = 1.0)",
    "fig9": "Normalized on-chip access (baseline2 = 1.0)",
    "fig10": "Rescaling reduction vs forward traversal",
}


def load_rows(spec: FigureSpec) -> pd.DataFrame:
    try:
        frame = pd.read_csv(spec.input_csv)
    except FileNotFoundError as exc:
        raise PlotError(f"input CSV not found: {spec.input_csv}") from exc
    required = FIGURE_COLUMNS[spec.figure_id]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise PlotError(
            f"{spec.figure_id} needs columns missing from {spec.input_csv}: "
            + ", ".join(missing)
        )
    return frame


def _primary_mode(frame: pd.DataFrame) -> str:
    modes = sorted(frame["positional_mode"].unique())
    preferred = [m for m in modes if m == "rope_like"]
    return preferred[0] if preferred else modes[0]


def _grouped_bars(ax, table: pd.DataFrame, series: list[str]) -> None:
    """table: index = seq_len groups, one column per series."""
    groups = list(table.index)
    width = 0.8 / len(series)
    for i, name in enumerate(series):
        xs = [g + (i - (len(series) - 1) / 2) * width for g in range(len(groups))]
        ax.bar(xs, table[name].to_numpy(), width=width, label=name)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels([str(g) for g in groups])
    ax.set_xlabel("sequence length")
    ax.legend(fontsize=8)


def _per_design_figure(frame: pd.DataFrame, value_column: str, title: str):
    mode = _primary_mode(frame)
    rows = frame[(frame["ablate"] == "none") & (frame["positional_mode"] == mode)]
    table = rows.pivot_table(index="seq_len", columns="design", values=value_column)
    series = [d for d in DESIGN_ORDER if d in table.columns]
    if not series:
        raise PlotError(f"no design rows found for {value_column}")
    fig, ax = plt.subplots(figsize=(6, 3.2), dpi=120)
    _grouped_bars(ax, table, series)
    ax.set_ylabel(value_column.replace("_", " "))
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    return fig


def _fig8(frame: pd.DataFrame, title: str):
    mode = _primary_mode(frame)
    rows = frame[(frame["ablate"] == "none") & (frame["positional_mode"] == mode)
                 & frame["design"].isin(["baseline1", "fusioncim"])]
    table = rows.pivot_table(index="seq_len", columns="design", values="offchip_bytes")
    if "baseline1" not in table.columns:
        raise PlotError("fig8 needs baseline1 rows to normalize against")
    norm = table.div(table["baseline1"], axis=0)
    series = [d for d in ("baseline1", "fusioncim") if d in norm.columns]
    fig, ax = plt.subplots(figsize=(6, 3.2), dpi=120)
    _grouped_bars(ax, norm, series)
    ax.set_ylabel("normalized off-chip bytes")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    return fig


def _fig9(frame: pd.DataFrame, title: str):
    mode = _primary_mode(frame)
    rows = frame[frame["positional_mode"] == mode]
    if not (rows["ablate"] != "none").any():
        raise PlotError(
            "fig9 needs ablation rows (ablate column values beyond 'none'); "
            "produce them with `fusioncim sweep --ablate kv-stream,transpose,psum`"
        )
    b2 = rows[(rows["design"] == "baseline2") & (rows["ablate"] == "none")]
    if b2.empty:
        raise PlotError("fig9 needs baseline2 rows to normalize against")
    base = b2.set_index("seq_len")["onchip_bytes"]
    fus = rows[rows["design"] == "fusioncim"]
    table = fus.pivot_table(index="seq_len", columns="ablate", values="onchip_bytes")
    norm = table.div(base, axis=0)
    display = pd.DataFrame(index=norm.index)
    display["baseline2"] = 1.0
    for ablation in ABLATION_ORDER:
        if ablation in norm.columns:
            label = "fusioncim" if ablation == "none" else f"ablate {ablation}"
            display[label] = norm[ablation]
    fig, ax = plt.subplots(figsize=(6.5, 3.2), dpi=120)
    _grouped_bars(ax, display, list(display.columns))
    ax.set_ylabel("normalized on-chip bytes")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    return fig


def _fig10(frame: pd.DataFrame, title: str):
    rows = frame[(frame["design"] == "fusioncim") & (frame["ablate"] == "none")]
    if rows.empty:
        raise PlotError("fig10 needs fusioncim rows with rescaling statistics")
    table = rows.pivot_table(index="positional_mode", columns="order",
                             values="rescale_reduction_vs_forward", aggfunc="mean")
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=120)
    groups = list(table.index)
    series = list(table.columns)
    width = 0.8 / len(series)
    for i, name in enumerate(series):
        xs = [g + (i - (len(series) - 1) / 2) * width for g in range(len(groups))]
        ax.bar(xs, table[name].to_numpy(), width=width, label=f"order {name}")
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("rescaling reduction vs forward")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def build_figure(spec: FigureSpec):
    """Build (but do not save) the matplotlib figure for a spec."""
    if spec.figure_id not in FIGURE_COLUMNS:
        raise PlotError(f"unknown figure id {spec.figure_id!r}; "
                        f"expected one of {sorted(FIGURE_COLUMNS)}")
    frame = load_rows(spec)
    title = spec.title or FIGURE_TITLES[spec.figure_id]
    if spec.figure_id == "fig6":
        return _per_design_figure(frame, "normalized_latency", title)
    if spec.figure_id == "fig7":
        return _per_design_figure(frame, "normalized_energy", title)
    if spec.figure_id == "fig8":
        return _fig8(frame, title)
    if spec.figure_id == "fig9":
        return _fig9(frame, title)
    return _fig10(frame, title)


def render(spec: FigureSpec) -> Path:
    """Render a figure spec to its output path (.png or .svg)."""
    out = Path(spec.output_path)
    if out.suffix not in (".png", ".svg"):
        raise PlotError(f"unsupported output format {out.suffix!r}; use .png or .svg")
    fig = build_figure(spec)
    try:
        # Strip the SVG date stamp so identical inputs give identical bytes.
        metadata = {"Date": None} if out.suffix == ".svg" else None
        fig.savefig(out, metadata=metadata)
    finally:
        plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--fig", required=True, choices=sorted(FIGURE_COLUMNS))
    parser.add_argument("--in", dest="input_csv", required=True)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    spec = FigureSpec(figure_id=args.fig, input_csv=args.input_csv,
                      output_path=args.out)
    try:
        out = render(spec)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
