"""Independent brute-force oracles the tests check the library against.

Everything here is written from the mathematical definition with explicit
loops (or a second, unrelated formulation) and never calls the code path it
validates.
"""

from __future__ import annotations

import numpy as np


def matmul_3loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def conv2d_direct(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None,
                  stride: int, padding: int) -> np.ndarray:
    """Six nested loops straight from the cross-correlation definition."""
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    out = np.zeros((b, cout, ho, wo), dtype=np.float64)
    for bi in range(b):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += float(xp[bi, ci, oy * stride + ky, ox * stride + kx]) \
                                    * float(kernel[co, ci, ky, kx])
                    out[bi, co, oy, ox] = acc + (0.0 if bias is None else float(bias[co]))
    return out


def group_stats_2pass(x: np.ndarray, groups: int):
    """Per-(sample, group) mean and variance via an explicit two-pass sweep."""
    b, c, h, w = x.shape
    cg = c // groups
    means = np.zeros((b, groups))
    variances = np.zeros((b, groups))
    for bi in range(b):
        for g in range(groups):
            vals = [float(x[bi, ci, yi, xi])
                    for ci in range(g * cg, (g + 1) * cg)
                    for yi in range(h) for xi in range(w)]
            mu = sum(vals) / len(vals)
            means[bi, g] = mu
            variances[bi, g] = sum((v - mu) ** 2 for v in vals) / len(vals)
    return means, variances


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis, the textbook way."""
    out = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    oflat = out.reshape(-1, x.shape[-1])
    for i in range(flat.shape[0]):
        row = flat[i] - flat[i].max()
        e = np.exp(row)
        oflat[i] = e / e.sum()
    return out


def single_context_attention(q_tokens: np.ndarray, ctx: np.ndarray,
                             wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
                             wo: np.ndarray, heads: int) -> np.ndarray:
    """Full cross-attention over one context, per batch item and head, built
    from plain loops + the row softmax above. Projections are bias-free."""
    b, tq, _ = q_tokens.shape
    c = wq.shape[0]
    dh = c // heads
    out = np.zeros((b, tq, c), dtype=np.float64)
    for bi in range(b):
        q = q_tokens[bi] @ wq.T
        k = ctx[bi] @ wk.T
        v = ctx[bi] @ wv.T
        merged = np.zeros((tq, c), dtype=np.float64)
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            scores = (q[:, sl] @ k[:, sl].T) / np.sqrt(dh)
            att = softmax_rows(scores)
            merged[:, sl] = att @ v[:, sl]
        out[bi] = merged @ wo.T
    return out


def erode4_ref(mask: np.ndarray) -> np.ndarray:
    """4-neighborhood erosion by explicit neighbor checks (zero border)."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            ok = True
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if yy < 0 or yy >= h or xx < 0 or xx >= w or not mask[yy, xx]:
                    ok = False
                    break
            out[y, x] = ok
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst per-element |a-b| / max(|a|,|b|,floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def scale_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| normalized by the reference magnitude (b)."""
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - b))) / scale
