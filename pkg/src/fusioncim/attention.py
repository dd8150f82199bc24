"""Attention numerics: exact oracle, streamed online softmax, approximate exp.

The streamed path folds the single-score online-softmax recurrence over an
arbitrary per-row traversal order and accounts rescaling events exactly:

    m' = max(m, s)
    l' = l * e^(m - m') + e^(s - m')
    o' = o * e^(m - m') + e^(s - m') * v

A rescaling event is a step where the running maximum strictly increases
*after* at least one prior accumulation (so a monotonically decreasing score
stream causes zero rescalings, and the first score never counts).  Masked
(causal) entries are skipped entirely, never processed as -inf.

All arithmetic is 64-bit.  The score scale (1/sqrt(d)) is applied when scores
are produced, not inside the recurrence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_LUT_RANGE = 16
# Taylor evaluation keeps terms through x^8: eight multiply-accumulate steps
# on the fractional part.  Seven steps would miss the 1e-5 relative error
# budget at the f -> -1 end of the range.
TAYLOR_MAC_STEPS = 8

_FACTORIAL_HORNER = [float(k) for k in range(TAYLOR_MAC_STEPS, 0, -1)]


class TraceError(Exception):
    """Malformed score-trace file (bad header, size mismatch, truncation)."""


def make_exp_lut(lut_range: int = DEFAULT_LUT_RANGE) -> np.ndarray:
    """Table of e^(-k) for integer k in [0, lut_range]."""
    return np.exp(-np.arange(lut_range + 1, dtype=np.float64))


def taylor_exp(x, lut: np.ndarray | None = None, lut_range: int = DEFAULT_LUT_RANGE):
    """LUT-plus-Taylor approximation of e^x for x <= 0.

    The integer part is looked up (lut[-ceil(x)]), the fractional part
    f = x - ceil(x) in (-1, 0] is expanded through f^8.  Inputs below
    -lut_range saturate to 0 (documented underflow).  Relative error is
    below 1e-5 on [-lut_range, 0].
    """
    scalar = np.isscalar(x) or np.ndim(x) == 0
    xv = np.asarray(x, dtype=np.float64)
    if np.any(xv > 0.0):
        raise ValueError("taylor_exp requires x <= 0 (max-subtracted scores)")
    if lut is None:
        lut = make_exp_lut(lut_range)
    nrange = len(lut) - 1
    finite = np.isfinite(xv)
    in_range = finite & (xv >= -nrange)
    n = np.zeros_like(xv)
    np.ceil(xv, where=in_range, out=n)
    f = np.where(in_range, xv - n, 0.0)
    # Horner form of sum_{k=0..8} f^k / k!: eight fused steps.
    poly = np.ones_like(f)
    for k in _FACTORIAL_HORNER:
        poly = 1.0 + f * poly / k
    idx = np.where(in_range, -n, 0).astype(np.int64)
    out = np.where(in_range, lut[idx] * poly, 0.0)
    return float(out) if scalar else out


@dataclass
class ExpUnit:
    """Pluggable exponential: bit-exact reference or the 8-step Taylor unit.

    ``underflow_count`` tracks finite inputs below the LUT range that were
    saturated to zero.
    """

    mode: str = "exact"  # "exact" | "taylor8"
    lut_range: int = DEFAULT_LUT_RANGE
    underflow_count: int = 0
    _lut: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("exact", "taylor8"):
            raise ValueError(f"unknown exp mode {self.mode!r}")
        if self.mode == "taylor8":
            self._lut = make_exp_lut(self.lut_range)

    def __call__(self, x):
        if self.mode == "exact":
            return np.exp(x) if not np.isscalar(x) else math.exp(x)
        xv = np.asarray(x, dtype=np.float64)
        self.underflow_count += int(np.count_nonzero(np.isfinite(xv) & (xv < -self.lut_range)))
        return taylor_exp(x, lut=self._lut)


@dataclass
class OnlineSoftmaxState:
    """Running (max, denominator, output accumulator) for one output row."""

    m: float = -math.inf
    l: float = 0.0
    o: np.ndarray | None = None
    rescale_count: int = 0
    steps: int = 0


def online_step(state: OnlineSoftmaxState, s: float, v: np.ndarray,
                exp_unit: ExpUnit | None = None) -> OnlineSoftmaxState:
    """One online-softmax accumulation; total on finite inputs, returns a new state."""
    if not math.isfinite(s):
        raise ValueError("masked scores must be skipped upstream, not passed in")
    unit = exp_unit if exp_unit is not None else ExpUnit()
    v = np.asarray(v, dtype=np.float64)
    if state.steps == 0:
        # e^(s - s) = 1 exactly; nothing accumulated yet, so no rescale.
        return OnlineSoftmaxState(m=s, l=1.0, o=v.copy(), rescale_count=0, steps=1)
    rescale = s > state.m
    m_new = s if rescale else state.m
    corr = float(unit(state.m - m_new)) if rescale else 1.0
    w = float(unit(s - m_new))
    o = state.o * corr + w * v if state.o is not None else w * v
    return OnlineSoftmaxState(
        m=m_new,
        l=state.l * corr + w,
        o=o,
        rescale_count=state.rescale_count + (1 if rescale else 0),
        steps=state.steps + 1,
    )


def exact_attention(q, k, v, causal: bool = False, scale: float | None = None) -> np.ndarray:
    """Two-pass safe-softmax attention oracle (row max, then normalize)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be 2-D")
    r, d = q.shape
    n = k.shape[0]
    if k.shape[1] != d or v.shape[0] != n:
        raise ValueError(f"dimension mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if causal and r > n:
        raise ValueError("causal attention requires rows <= cols")
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    s = scale * (q @ k.T)
    if causal:
        offset = n - r
        col = np.arange(n)[None, :]
        row = np.arange(r)[:, None]
        s = np.where(col > row + offset, -np.inf, s)
    m = s.max(axis=1, keepdims=True)
    p = np.exp(s - m)
    return (p @ v) / p.sum(axis=1, keepdims=True)


def row_limits(rows: int, cols: int, causal: bool) -> np.ndarray:
    """Valid-prefix length per output row; causal rows end at their diagonal."""
    if not causal:
        return np.full(rows, cols, dtype=np.int64)
    if rows > cols:
        raise ValueError("causal attention requires rows <= cols")
    offset = cols - rows
    return np.arange(rows, dtype=np.int64) + offset + 1


def _resolve_order(order, rows: int, cols: int, causal: bool) -> list[np.ndarray]:
    limits = row_limits(rows, cols, causal)
    if order is None or order == "forward":
        return [np.arange(lim, dtype=np.int64) for lim in limits]
    if order in ("reverse", "reverse_diagonal_first"):
        return [np.arange(lim - 1, -1, -1, dtype=np.int64) for lim in limits]
    seqs = getattr(order, "rows", order)
    if isinstance(seqs, str):
        raise ValueError(f"unknown traversal order {order!r}")
    return [np.asarray(seq, dtype=np.int64) for seq in seqs]


def _check_permutations(seqs: list[np.ndarray], limits: np.ndarray) -> None:
    for i, (seq, lim) in enumerate(zip(seqs, limits)):
        if len(seq) != lim or not np.array_equal(np.sort(seq), np.arange(lim)):
            raise ValueError(
                f"row {i}: traversal is not a permutation of its {lim} valid columns"
            )


@dataclass
class PsumQuantizer:
    """Dynamic symmetric quantization of the output accumulator row.

    The scale is a per-row running maximum of |o| updated at every step;
    values are rounded to nearest-even on a (2^(bits-1) - 1)-level grid and
    dequantized before the next accumulation.  Disabled means the streamed
    path is bit-exact to the unquantized recurrence.
    """

    enabled: bool = True
    bits: int = 8

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1


def quantize_psum(o_row: np.ndarray, scale: float, quantizer: PsumQuantizer) -> tuple[np.ndarray, float]:
    """Quantize one accumulator row against a running-max scale.

    Returns the dequantized row and the updated scale state.  An all-zero row
    leaves the scale untouched and quantizes to zero.
    """
    o_row = np.asarray(o_row, dtype=np.float64)
    new_scale = max(scale, float(np.max(np.abs(o_row))) if o_row.size else 0.0)
    if new_scale == 0.0:
        return np.zeros_like(o_row), scale
    step = new_scale / quantizer.qmax
    q = np.clip(np.round(o_row / step), -quantizer.qmax, quantizer.qmax)
    return q * step, new_scale


def _quantize_block(block: np.ndarray, scales: np.ndarray, qmax: int) -> np.ndarray:
    nz = scales > 0.0
    out = np.zeros_like(block)
    if np.any(nz):
        step = scales[nz, None] / qmax
        out[nz] = np.clip(np.round(block[nz] / step), -qmax, qmax) * step
    return out


@dataclass
class RescaleStats:
    """Rescaling and exponential-op accounting for one streamed attention run."""

    per_row: np.ndarray
    steps_per_row: np.ndarray
    score_exps: int
    rescale_exps: int
    underflows: int = 0

    @property
    def total_rescales(self) -> int:
        return int(self.per_row.sum())

    @property
    def total_steps(self) -> int:
        return int(self.steps_per_row.sum())

    @property
    def exp_evals(self) -> int:
        """Total exponential-unit invocations: one per score plus one per rescale."""
        return self.score_exps + self.rescale_exps


def streamed_attention(
    scores,
    v=None,
    order=None,
    exp_unit: ExpUnit | None = None,
    quantizer: PsumQuantizer | None = None,
    causal: bool = False,
    validate: bool = True,
) -> tuple[np.ndarray | None, RescaleStats]:
    """Stream a score matrix through the online-softmax recurrence.

    ``order`` is a per-row permutation of the row's valid columns: None or
    "forward", "reverse" (diagonal first under causal masking), an object
    with a ``rows`` attribute, or an explicit list of index arrays.  With
    ``v=None`` only the rescaling statistics are produced (the accumulator is
    skipped), which is what the system-level cost model consumes.

    Rows are processed in lockstep; the result is identical to folding
    :func:`online_step` over each row's stream.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("scores must be 2-D")
    r, n = s.shape
    limits = row_limits(r, n, causal)
    seqs = _resolve_order(order, r, n, causal)
    if len(seqs) != r:
        raise ValueError(f"order has {len(seqs)} rows, scores have {r}")
    if validate:
        _check_permutations(seqs, limits)
    unit = exp_unit if exp_unit is not None else ExpUnit()

    vv = None
    o = None
    if v is not None:
        vv = np.asarray(v, dtype=np.float64)
        if vv.ndim != 2 or vv.shape[0] != n:
            raise ValueError(f"v must be ({n}, d), got {vv.shape}")
        o = np.zeros((r, vv.shape[1]), dtype=np.float64)

    lens = np.array([len(seq) for seq in seqs], dtype=np.int64)
    longest = int(lens.max()) if r else 0
    idx = np.zeros((r, longest), dtype=np.int64)
    for i, seq in enumerate(seqs):
        idx[i, : len(seq)] = seq

    m = np.full(r, -np.inf)
    l = np.zeros(r)
    qscale = np.zeros(r)
    resc = np.zeros(r, dtype=np.int64)
    rescale_exps = 0

    for t in range(longest):
        active = np.nonzero(lens > t)[0]
        cols = idx[active, t]
        st = s[active, cols]
        if t == 0:
            m[active] = st
            l[active] = 1.0
            if o is not None:
                o[active] = vv[cols]
        else:
            m_old = m[active]
            up = st > m_old
            m_new = np.where(up, st, m_old)
            corr = np.ones(len(active))
            if np.any(up):
                corr[up] = unit(m_old[up] - m_new[up])
                resc[active] += up
                rescale_exps += int(np.count_nonzero(up))
            w = unit(st - m_new)
            l[active] = l[active] * corr + w
            m[active] = m_new
            if o is not None:
                o[active] = o[active] * corr[:, None] + w[:, None] * vv[cols]
        if quantizer is not None and quantizer.enabled and o is not None:
            qscale[active] = np.maximum(qscale[active], np.abs(o[active]).max(axis=1))
            o[active] = _quantize_block(o[active], qscale[active], quantizer.qmax)

    out = o / l[:, None] if o is not None else None
    stats = RescaleStats(
        per_row=resc,
        steps_per_row=lens,
        score_exps=int(lens.sum()),
        rescale_exps=rescale_exps,
        underflows=unit.underflow_count,
    )
    return out, stats


def streamed_attention_qkv(q, k, v, order=None, exp_unit=None, quantizer=None,
                           causal=False, scale=None):
    """Convenience wrapper: build the scaled score matrix, then stream it."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    scores = scale * (q @ k.T)
    return streamed_attention(scores, v, order=order, exp_unit=exp_unit,
                              quantizer=quantizer, causal=causal)


@dataclass(frozen=True)
class ScoreGen:
    """Synthetic score-distribution proxy.

    ``alibi_like`` subtracts a linear distance penalty from zero-mean noise,
    ``rope_like`` adds a decaying locality bump, ``uniform`` is pure noise.
    Distances are measured from each row's diagonal column.
    """

    mode: str = "uniform"
    seed: int = 0
    noise_std: float = 1.0
    alibi_slope: float = 4.0
    locality_scale: float = 2.0
    tau: float = 64.0


def generate_scores(gen: ScoreGen, rows: int, n: int, causal: bool = True) -> np.ndarray:
    """Deterministic (per seed) score matrix; masked entries hold -inf."""
    if gen.mode not in ("uniform", "alibi_like", "rope_like"):
        raise ValueError(f"unknown score generator mode {gen.mode!r}")
    rng = np.random.default_rng(gen.seed)
    s = rng.normal(0.0, gen.noise_std, size=(rows, n))
    offset = n - rows if causal else 0
    if gen.mode != "uniform":
        col = np.arange(n, dtype=np.float64)[None, :]
        row = np.arange(rows, dtype=np.float64)[:, None]
        dist = row + offset - col
        if not causal:
            dist = np.abs(dist)
        if gen.mode == "alibi_like":
            s = s - gen.alibi_slope * dist
        else:
            s = s + gen.locality_scale * np.exp(-np.abs(dist) / gen.tau)
    if causal:
        mask = np.arange(n)[None, :] > (np.arange(rows)[:, None] + offset)
        s[mask] = -np.inf
    return s


def count_rescales(scores, order="forward", causal: bool = True) -> np.ndarray:
    """Per-row rescaling-event counts via running prefix maxima.

    Independent of the streamed recurrence (pure gather + cummax); also the
    fast path for system-level accounting where the accumulator is not needed.
    """
    s = np.asarray(scores, dtype=np.float64)
    r, n = s.shape
    seqs = _resolve_order(order, r, n, causal)
    lens = np.array([len(seq) for seq in seqs], dtype=np.int64)
    longest = int(lens.max()) if r else 0
    g = np.full((r, longest), -np.inf)
    for i, seq in enumerate(seqs):
        g[i, : len(seq)] = s[i, seq]
    if longest <= 1:
        return np.zeros(r, dtype=np.int64)
    running = np.maximum.accumulate(g, axis=1)
    return (g[:, 1:] > running[:, :-1]).sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# Score trace files: one JSON header line, then rows*cols little-endian f32.

def write_trace(path: str | Path, scores, causal: bool = False) -> None:
    s = np.ascontiguousarray(scores, dtype="<f4")
    if s.ndim != 2:
        raise TraceError("trace payload must be a 2-D matrix")
    header = json.dumps(
        {"rows": int(s.shape[0]), "cols": int(s.shape[1]), "dtype": "f32le",
         "causal": bool(causal)},
        separators=(",", ":"),
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(s.tobytes())


def read_trace(path: str | Path) -> tuple[np.ndarray, bool]:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("ascii"))
        rows, cols = int(header["rows"]), int(header["cols"])
        dtype, causal = header["dtype"], bool(header["causal"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise TraceError(f"malformed trace header: {exc}") from exc
    if dtype != "f32le":
        raise TraceError(f"unsupported trace dtype {dtype!r}")
    expected = rows * cols * 4
    if len(payload) != expected:
        kind = "truncated payload" if len(payload) < expected else "oversized payload"
        raise TraceError(f"{kind}: header says {expected} bytes, file has {len(payload)}")
    mat = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return mat.copy(), causal
