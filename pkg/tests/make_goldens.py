"""Regenerate frozen golden files.

Run from the repository root:  python tests/make_goldens.py

The attention golden is computed with 50-digit mpmath arithmetic, entirely
independent of the package's numpy implementation, and frozen to JSON.  The
psum-quantizer error golden is measured once from a pinned reference run and
frozen (measure-then-freeze: the assertion checks the behaviour never drifts
past what was measured).
"""

import json
from pathlib import Path

import mpmath as mp
import numpy as np

GOLDEN_DIR = Path(__file__).parent / "golden"


def mp_attention(q, k, v, causal, dps=50):
    """Reference attention in arbitrary-precision arithmetic."""
    mp.mp.dps = dps
    r, d = q.shape
    n = k.shape[0]
    scale = 1 / mp.sqrt(d)
    out = np.zeros((r, v.shape[1]), dtype=object)
    offset = n - r
    for i in range(r):
        limit = min(n, i + offset + 1) if causal else n
        scores = [scale * mp.fsum(mp.mpf(q[i, t]) * mp.mpf(k[j, t]) for t in range(d))
                  for j in range(limit)]
        m = max(scores)
        weights = [mp.e ** (s - m) for s in scores]
        denom = mp.fsum(weights)
        for c in range(v.shape[1]):
            out[i, c] = mp.fsum(w * mp.mpf(v[j, c]) for j, w in enumerate(weights)) / denom
    return np.array([[float(x) for x in row] for row in out])


def golden_exact_attention():
    rng = np.random.default_rng(42)
    r, n, d = 4, 16, 8
    q = rng.normal(size=(r, d))
    k = rng.normal(size=(n, d))
    v = rng.normal(size=(n, d))
    doc = {
        "r": r, "n": n, "d": d, "seed": 42,
        "q": q.tolist(), "k": k.tolist(), "v": v.tolist(),
        "expected_causal": mp_attention(q, k, v, causal=True).tolist(),
        "expected_full": mp_attention(q, k, v, causal=False).tolist(),
    }
    (GOLDEN_DIR / "exact_attention_r4n16d8.json").write_text(json.dumps(doc, indent=1))
    print("wrote exact_attention_r4n16d8.json")


def golden_quantizer_error():
    from fusioncim.attention import PsumQuantizer, streamed_attention
    rng = np.random.default_rng(7)
    r, n, d = 4, 64, 16
    scores = rng.normal(size=(r, n))
    v = rng.normal(size=(n, d))
    ref, _ = streamed_attention(scores, v)
    quant, _ = streamed_attention(scores, v, quantizer=PsumQuantizer(bits=8))
    err = float(np.linalg.norm(quant - ref) / np.linalg.norm(ref))
    doc = {"r": r, "n": n, "d": d, "seed": 7, "bits": 8,
           "measured_rel_frobenius_error": err}
    (GOLDEN_DIR / "psum_quantizer_error.json").write_text(json.dumps(doc, indent=1))
    print(f"wrote psum_quantizer_error.json (err={err:.6e})")


if __name__ == "__main__":
    GOLDEN_DIR.mkdir(exist_ok=True)
    golden_exact_attention()
    golden_quantizer_error()
