"""Pattern-aware scheduling: staggered inter-tile multicast and traversal orders.

Inter-tile: KV tiles are broadcast to the hybrid engines in a staggered
pattern.  Within one wave every active engine consumes the *same* KV tile at
the same step, so a tile is read from the global buffer once per step and
multicast; an engine whose query tile needs fewer KV tiles simply starts
later.  Under causal masking the engine holding query tile n receives exactly
tiles n, n-1, ..., 0 in that order, i.e. its diagonal tile first.

Intra-tile: engines walk each received tile in reverse index order, so every
output row meets its nearest-to-diagonal valid column first.  Together the
two levels make each row's first visited column its diagonal, which is what
slashes online-softmax rescaling on diagonal-peaked score distributions.

When there are more work units than engines, units are assigned in waves.
Consecutive waves alternate assignment direction (snake order): a plain
modulo assignment would pile the long diagonal units onto the same engines
wave after wave, while alternating pairs of staircase waves cancel exactly,
keeping per-engine tile totals within one tile of each other over complete
even wave counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .workload import WorkloadSpec

INTRA_MODES = ("forward", "reverse_diagonal_first", "random")


class ScheduleError(Exception):
    pass


@dataclass(frozen=True)
class Unit:
    """One (query head, query tile) work item and its KV tile visit order."""

    q_head: int
    kv_head: int
    q_tile: int
    tiles: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tiles)


@dataclass(frozen=True)
class WaveStep:
    step: int
    kv_head: int
    kv_tile: int
    dests: frozenset[int]


@dataclass
class Wave:
    assignments: dict[int, Unit]  # he id -> unit
    length: int                   # steps in the wave (longest unit)
    steps: list[WaveStep]

    def offset(self, he: int) -> int:
        """Steps an engine idles before its first tile arrives."""
        return self.length - len(self.assignments[he])


@dataclass
class BroadcastSchedule:
    n_hes: int
    causal: bool
    waves: list[Wave]

    @property
    def steps(self) -> list[tuple[int, frozenset[int]]]:
        """Flat (kv_tile, destinations) view across waves, in broadcast order."""
        return [(s.kv_tile, s.dests) for w in self.waves for s in w.steps]

    @property
    def assignment(self) -> dict[tuple[int, int], int]:
        """(q_head, q_tile) -> engine. First occurrence wins per unit."""
        out: dict[tuple[int, int], int] = {}
        for w in self.waves:
            for he, unit in w.assignments.items():
                out.setdefault((unit.q_head, unit.q_tile), he)
        return out

    def he_sequences(self) -> dict[int, list[tuple[int, int]]]:
        """Per-engine (kv_head, kv_tile) receive order across all waves."""
        seqs: dict[int, list[tuple[int, int]]] = {he: [] for he in range(self.n_hes)}
        for w in self.waves:
            for he, unit in w.assignments.items():
                seqs[he].extend((unit.kv_head, t) for t in unit.tiles)
        return seqs

    def he_units(self) -> dict[int, list[Unit]]:
        out: dict[int, list[Unit]] = {he: [] for he in range(self.n_hes)}
        for w in self.waves:
            for he, unit in w.assignments.items():
                out[he].append(unit)
        return out

    def tiles_per_he(self) -> dict[int, int]:
        return {he: sum(len(u) for u in units) for he, units in self.he_units().items()}

    @property
    def num_broadcast_events(self) -> int:
        """Global-buffer tile reads: one per broadcast step, not per destination."""
        return sum(len(w.steps) for w in self.waves)

    @property
    def total_deliveries(self) -> int:
        return sum(len(s.dests) for w in self.waves for s in w.steps)


def _unit_tiles(q_tile: int, kv_tiles: int, causal: bool, decode: bool) -> tuple[int, ...]:
    if causal and not decode:
        last = min(q_tile, kv_tiles - 1)
        return tuple(range(last, -1, -1))
    if decode:
        # Decode rows sit at the sequence end: every KV tile, most recent first.
        return tuple(range(kv_tiles - 1, -1, -1))
    # Non-causal: start at the own diagonal tile, proceed downward, wrap around.
    start = min(q_tile, kv_tiles - 1)
    down = list(range(start, -1, -1))
    wrap = list(range(kv_tiles - 1, start, -1))
    return tuple(down + wrap)


def _build_waves(units: list[Unit], n_hes: int) -> list[Wave]:
    waves = []
    for w, lo in enumerate(range(0, len(units), n_hes)):
        chunk = units[lo: lo + n_hes]
        if w % 2 == 0:
            assignments = {he: unit for he, unit in enumerate(chunk)}
        else:  # snake: reverse direction to balance the staircase loads
            assignments = {n_hes - 1 - p: unit for p, unit in enumerate(chunk)}
        length = max(len(u) for u in chunk)
        steps: list[WaveStep] = []
        for t in range(length):
            groups: dict[tuple[int, int], set[int]] = {}
            for he, unit in assignments.items():
                off = length - len(unit)
                if t >= off:
                    key = (unit.kv_head, unit.tiles[t - off])
                    groups.setdefault(key, set()).add(he)
            for (kv_head, kv_tile) in sorted(groups):
                steps.append(WaveStep(t, kv_head, kv_tile, frozenset(groups[(kv_head, kv_tile)])))
        waves.append(Wave(assignments=assignments, length=length, steps=steps))
    return waves


def build_inter_tile_schedule(
    n_qtiles: int,
    n_hes: int,
    causal: bool = True,
    n_kvtiles: int | None = None,
) -> BroadcastSchedule:
    """Single-head staggered broadcast schedule.

    With n_qtiles <= n_hes, query tile n maps to engine n and broadcast step t
    carries KV tile (n_qtiles-1-t) to every engine whose tile index is at
    least that.  Larger tile counts are split into snake-assigned waves.
    """
    if n_qtiles < 1 or n_hes < 1:
        raise ScheduleError("n_qtiles and n_hes must be >= 1")
    kv = n_kvtiles if n_kvtiles is not None else n_qtiles
    units = [Unit(0, 0, n, _unit_tiles(n, kv, causal, decode=False)) for n in range(n_qtiles)]
    return BroadcastSchedule(n_hes=n_hes, causal=causal, waves=_build_waves(units, n_hes))


def build_system_schedule(workload: WorkloadSpec, n_hes: int) -> BroadcastSchedule:
    """Head-major schedule over every (q_head, q_tile) unit of the layer.

    Query heads that share a KV head land in the same or adjacent waves, so
    their broadcast steps coalesce into shared multicast events.
    """
    decode = workload.phase == "decode"
    units = [
        Unit(q_head, kv_head, n, _unit_tiles(n, workload.kv_tiles, workload.causal, decode))
        for q_head, kv_head in workload.heads
        for n in range(workload.q_tiles)
    ]
    return BroadcastSchedule(n_hes=n_hes, causal=workload.causal,
                             waves=_build_waves(units, n_hes))


def intra_tile_order(
    tile_len: int,
    row_diag_col: int | None = None,
    mode: str = "reverse_diagonal_first",
    seed: int | None = None,
) -> np.ndarray:
    """Local column visit order for one row within one KV tile.

    ``row_diag_col`` is the row's diagonal in local coordinates; columns past
    it are masked and skipped.  None means the whole tile is valid.
    """
    if mode not in INTRA_MODES:
        raise ScheduleError(f"unknown intra-tile mode {mode!r}")
    limit = tile_len if row_diag_col is None else min(row_diag_col + 1, tile_len)
    if limit <= 0:
        return np.empty(0, dtype=np.int64)
    if mode == "forward":
        return np.arange(limit, dtype=np.int64)
    if mode == "reverse_diagonal_first":
        return np.arange(limit - 1, -1, -1, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return rng.permutation(limit).astype(np.int64)


@dataclass
class TraversalOrder:
    """Realized per-row column visit orders for one head's score matrix."""

    mode: str
    n_cols: int
    rows: list[np.ndarray] = field(default_factory=list)

    @staticmethod
    def _limits(n_rows: int, n_cols: int, causal: bool) -> np.ndarray:
        if causal and n_rows > n_cols:
            raise ScheduleError("causal traversal requires rows <= cols")
        if not causal:
            return np.full(n_rows, n_cols, dtype=np.int64)
        return np.arange(n_rows, dtype=np.int64) + (n_cols - n_rows) + 1

    @classmethod
    def forward(cls, n_rows: int, n_cols: int, causal: bool = True) -> "TraversalOrder":
        lims = cls._limits(n_rows, n_cols, causal)
        return cls("forward", n_cols, [np.arange(lim, dtype=np.int64) for lim in lims])

    @classmethod
    def reverse_diagonal_first(cls, n_rows: int, n_cols: int, causal: bool = True) -> "TraversalOrder":
        lims = cls._limits(n_rows, n_cols, causal)
        return cls("reverse_diagonal_first", n_cols,
                   [np.arange(lim - 1, -1, -1, dtype=np.int64) for lim in lims])

    @classmethod
    def random(cls, n_rows: int, n_cols: int, causal: bool = True, seed: int = 0) -> "TraversalOrder":
        lims = cls._limits(n_rows, n_cols, causal)
        rng = np.random.default_rng(seed)
        return cls(f"random({seed})", n_cols,
                   [rng.permutation(int(lim)).astype(np.int64) for lim in lims])

    def is_valid(self, causal: bool = True) -> bool:
        lims = self._limits(len(self.rows), self.n_cols, causal)
        return all(
            len(seq) == lim and np.array_equal(np.sort(seq), np.arange(lim))
            for seq, lim in zip(self.rows, lims)
        )


def schedule_to_traversal(
    schedule: BroadcastSchedule,
    workload: WorkloadSpec,
    q_head: int = 0,
    intra_mode: str = "reverse_diagonal_first",
    seed: int = 0,
) -> TraversalOrder:
    """Compose the per-engine tile order with intra-tile orders into full
    per-row column visit sequences for one query head."""
    tile = workload.tile
    n = workload.seq_len
    unit_by_tile: dict[int, Unit] = {}
    for wave in schedule.waves:
        for unit in wave.assignments.values():
            if unit.q_head == q_head:
                unit_by_tile[unit.q_tile] = unit
    if len(unit_by_tile) != workload.q_tiles:
        raise ScheduleError(
            f"schedule covers {len(unit_by_tile)} q tiles for head {q_head}, "
            f"workload has {workload.q_tiles}"
        )
    for unit in unit_by_tile.values():
        if unit.tiles and max(unit.tiles) >= workload.kv_tiles:
            raise ScheduleError("schedule references kv tiles beyond the workload")

    causal = workload.causal
    offset = n - workload.q_rows
    rows: list[np.ndarray] = []
    for i in range(workload.q_rows):
        unit = unit_by_tile[i // tile]
        diag = i + offset if causal else n - 1
        parts = []
        for t_id, kv_tile in enumerate(unit.tiles):
            lo = kv_tile * tile
            hi = min((kv_tile + 1) * tile, n) - 1
            local_len = hi - lo + 1
            local_diag = None
            if causal:
                if diag < lo:
                    continue  # tile fully masked for this row
                if diag <= hi:
                    local_diag = diag - lo
            local = intra_tile_order(local_len, local_diag, intra_mode,
                                     seed=seed + 7919 * i + t_id)
            parts.append(lo + local)
        rows.append(np.concatenate(parts) if parts else np.empty(0, dtype=np.int64))
    return TraversalOrder(mode=f"schedule/{intra_mode}", n_cols=n, rows=rows)
