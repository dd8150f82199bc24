"""Tiled attention workload derivation for the prefill and parallel-decode phases."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import ModelConfig

PHASES = ("prefill", "decode")


class WorkloadError(Exception):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    """One attention layer's tile structure at INT8.

    Byte totals are per head: ``bytes_q``/``bytes_o`` per query head,
    ``bytes_k``/``bytes_v`` per KV head.  ``q_rows`` is the number of query
    rows actually loaded (sequence length in prefill, the parallel-decode
    batch in decode).  The last Q/KV tile may be partial; partial tiles still
    occupy a full tile slot in the pipeline but byte and op counters always
    use real vector counts.
    """

    phase: str
    seq_len: int
    decode_parallel: int
    tile: int
    q_rows: int
    q_tiles: int
    kv_tiles: int
    heads: tuple[tuple[int, int], ...]  # (q_head, kv_head) pairs
    head_dim: int
    causal: bool
    positional_mode: str
    bytes_q: int
    bytes_k: int
    bytes_v: int
    bytes_o: int

    @property
    def num_q_heads(self) -> int:
        return len(self.heads)

    @property
    def num_kv_heads(self) -> int:
        return len({kv for _, kv in self.heads})

    def kv_tile_vectors(self, tile_id: int) -> int:
        """Real KV vectors in a tile (the last tile may be partial)."""
        if not 0 <= tile_id < self.kv_tiles:
            raise WorkloadError(f"kv tile {tile_id} out of range")
        return min(self.tile, self.seq_len - tile_id * self.tile)

    def q_tile_rows(self, tile_id: int) -> int:
        if not 0 <= tile_id < self.q_tiles:
            raise WorkloadError(f"q tile {tile_id} out of range")
        return min(self.tile, self.q_rows - tile_id * self.tile)

    def causal_kv_tiles(self, q_tile: int) -> int:
        """KV tiles a query tile actually touches (triangle under causality).

        Decode rows sit at the end of the sequence, so a decode query tile
        touches every KV tile.
        """
        if not self.causal:
            return self.kv_tiles
        if self.phase == "decode":
            return self.kv_tiles
        return min(q_tile + 1, self.kv_tiles)

    def total_tile_visits(self) -> int:
        """(q_head, q_tile, kv_tile) triples processed over the whole layer."""
        per_head = sum(self.causal_kv_tiles(n) for n in range(self.q_tiles))
        return per_head * self.num_q_heads


def derive_workload(
    model: ModelConfig,
    phase: str,
    seq_len: int,
    decode_parallel: int = 1,
    tile: int = 128,
) -> WorkloadSpec:
    """Pure derivation of the tile structure; identical inputs, identical output.

    GQA mapping is contiguous-block: query heads ``0..g-1`` share KV head 0,
    the next ``g`` share KV head 1, and so on (the mapping does not affect
    any cost total, only labelling).
    """
    if phase not in PHASES:
        raise WorkloadError(f"unknown phase {phase!r}; expected one of {PHASES}")
    if seq_len <= 0:
        raise WorkloadError("seq_len must be positive")
    if seq_len > model.max_seq_len:
        raise WorkloadError(f"seq_len={seq_len} exceeds max_seq_len={model.max_seq_len}")
    if decode_parallel <= 0:
        raise WorkloadError("decode_parallel must be positive")
    if model.num_q_heads % model.num_kv_heads != 0:
        raise WorkloadError("num_q_heads must be a multiple of num_kv_heads")

    q_rows = seq_len if phase == "prefill" else decode_parallel
    group = model.num_q_heads // model.num_kv_heads
    heads = tuple((q, q // group) for q in range(model.num_q_heads))
    d = model.head_dim
    return WorkloadSpec(
        phase=phase,
        seq_len=seq_len,
        decode_parallel=decode_parallel if phase == "decode" else 1,
        tile=tile,
        q_rows=q_rows,
        q_tiles=math.ceil(q_rows / tile),
        kv_tiles=math.ceil(seq_len / tile),
        heads=heads,
        head_dim=d,
        causal=model.causal,
        positional_mode=model.positional_mode,
        bytes_q=q_rows * d,
        bytes_k=seq_len * d,
        bytes_v=seq_len * d,
        bytes_o=q_rows * d,
    )
