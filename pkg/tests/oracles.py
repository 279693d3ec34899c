"""Independent reference implementations used as test oracles.

These deliberately avoid the library's own computation paths: plain loops,
whole-sequence recomputation instead of caches, eigenvalues of the Gram
matrix instead of the Jacobi SVD, and brute-force enumeration instead of
greedy searches.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from rotkv.rope import ChunkSet, relative_score


def naive_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def sigma_via_gram(m):
    """Singular values from eigenvalues of the smaller Gram matrix."""
    m = np.asarray(m, dtype=np.float64)
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    eigs = np.linalg.eigvalsh(gram)
    return np.sqrt(np.clip(eigs, 0.0, None))[::-1]


def sigma_tail(m, r):
    """Frobenius error of the best rank-r approximation, from the Gram oracle."""
    sig = sigma_via_gram(m)
    return float(np.sqrt((sig[r:] ** 2).sum()))


def _rotate_all_chunks(vec, position, base):
    """Explicit per-chunk 2D rotation of every pair, plain loops."""
    out = np.array(vec, dtype=np.float64)
    dh = out.shape[0]
    for i in range(dh // 2):
        theta = base ** (-2.0 * i / dh)
        ang = position * theta
        c, s = math.cos(ang), math.sin(ang)
        x, y = out[2 * i], out[2 * i + 1]
        out[2 * i] = x * c - y * s
        out[2 * i + 1] = x * s + y * c
    return out


def _softmax(row):
    e = np.exp(row - row.max())
    return e / e.sum()


def naive_full_forward(cfg, weights, tokens):
    """Whole-sequence attention with full rotation, no cache.

    Recomputes every layer over all positions at once with explicit loops;
    returns the (T, d) hidden states of the last layer.
    """
    x = np.asarray(tokens, dtype=np.float64)
    t_len = x.shape[0]
    scale = cfg.head_dim ** -0.5
    h = x.copy()
    for lw in weights.layers:
        q = h @ lw.wq
        k = h @ lw.wk
        v = h @ lw.wv
        mixed = np.zeros((t_len, cfg.kv_width))
        for head in range(cfg.n_heads):
            hs = cfg.head_slice(head)
            qs = np.stack(
                [_rotate_all_chunks(q[t, hs], t, cfg.rope_base) for t in range(t_len)]
            )
            ks = np.stack(
                [_rotate_all_chunks(k[t, hs], t, cfg.rope_base) for t in range(t_len)]
            )
            for m in range(t_len):
                scores = np.array([qs[m] @ ks[n] for n in range(m + 1)]) * scale
                p = _softmax(scores)
                mixed[m, hs] = p @ v[: m + 1, hs]
        h = mixed @ lw.wo
    return h


def relative_mixed_forward(cfg, weights, elite_sets, tokens):
    """Whole-sequence attention scoring each pair with the relative form.

    ``elite_sets[layer][head]`` chooses which chunks rotate; the remaining
    chunks contribute plain dot products. No cache, no absolute rotation.
    """
    x = np.asarray(tokens, dtype=np.float64)
    t_len = x.shape[0]
    scale = cfg.head_dim ** -0.5
    params = cfg.rope
    h = x.copy()
    for li, lw in enumerate(weights.layers):
        q = h @ lw.wq
        k = h @ lw.wk
        v = h @ lw.wv
        mixed = np.zeros((t_len, cfg.kv_width))
        for head in range(cfg.n_heads):
            hs = cfg.head_slice(head)
            chunks = elite_sets[li][head]
            for m in range(t_len):
                scores = np.array([
                    relative_score(q[m, hs], k[n, hs], m, n, chunks, params)
                    for n in range(m + 1)
                ]) * scale
                p = _softmax(scores)
                mixed[m, hs] = p @ v[: m + 1, hs]
        h = mixed @ lw.wo
    return h


def subset_distance(cfg, weights, calib, layer, head, subset):
    """L1 score distance of one chunk subset against full rotation.

    Scores are evaluated pair by pair in relative form over every causal
    pair of every calibration sequence, scaled like the search does.
    """
    params = cfg.rope
    scale = cfg.head_dim ** -0.5
    full = ChunkSet.full(cfg.head_dim)
    sub = ChunkSet.of(subset)
    lw = weights.layers[layer]
    hs = cfg.head_slice(head)
    total = 0.0
    for seq in calib.sequences:
        q = seq @ lw.wq
        k = seq @ lw.wk
        for m in range(seq.shape[0]):
            for n in range(m + 1):
                ref = relative_score(q[m, hs], k[n, hs], m, n, full, params)
                cand = relative_score(q[m, hs], k[n, hs], m, n, sub, params)
                total += abs(ref - cand) * scale
    return total


def best_subset_by_enumeration(cfg, weights, calib, layer, head, r):
    """Exhaustive minimum-distance subset; ties to the lexicographically first."""
    best = None
    best_dist = math.inf
    for combo in itertools.combinations(range(cfg.head_dim // 2), r):
        dist = subset_distance(cfg, weights, calib, layer, head, combo)
        if dist < best_dist:
            best_dist = dist
            best = combo
    return best, best_dist


def best_split_by_enumeration(sig_k, sig_v, total, max_k, max_v):
    """Minimal total tail energy over all (d_ck, d_cv) with a fixed sum."""
    best = None
    best_err = math.inf
    for d_ck in range(1, max_k + 1):
        d_cv = total - d_ck
        if not 1 <= d_cv <= max_v:
            continue
        err = float((sig_k[d_ck:] ** 2).sum() + (sig_v[d_cv:] ** 2).sum())
        if err < best_err:
            best_err = err
            best = (d_ck, d_cv)
    return best, best_err


def slrd_params_unsimplified(d, head_dim, n_heads, r, d_ck, d_cv):
    h = head_dim * n_heads
    u = 2 * r * n_heads
    return u * d + d_ck * (d + h - u) + d_cv * (d + h)


def jlrd_params_unsimplified(d, head_dim, n_heads, r, d_ckv):
    h = head_dim * n_heads
    u = 2 * r * n_heads
    return u * d + d_ckv * (d + 2 * h - u)
