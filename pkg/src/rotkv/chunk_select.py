"""Per-head selection of the rotation chunks that matter most.

The greedy search measures, for each candidate chunk, how far attention
scores computed with rotation restricted to (current picks + candidate)
drift from scores under full rotation, as an L1 distance over all causal
query/key pairs of a calibration batch. One batched "forward pass" scores
every layer and head at once, so the pass count depends only on the head
dimension and the number of picks, never on layer or head counts.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, RankError, SearchSpaceError, SelectionError
from .model import AttentionWeights, ModelConfig
from .rope import ChunkSet, rotate_block

EXHAUSTIVE_GUARD = 100_000

SCORE_MODES = ("pre", "post")


@dataclass(frozen=True)
class CalibrationBatch:
    """Token-embedding sequences used to probe attention scores."""

    sequences: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.sequences:
            raise CalibrationError("calibration batch has no sequences")
        if not any(seq.shape[0] >= 2 for seq in self.sequences):
            raise CalibrationError("need at least one sequence of length >= 2")

    def validate(self, cfg: ModelConfig) -> None:
        for i, seq in enumerate(self.sequences):
            if seq.ndim != 2 or seq.shape[1] != cfg.embed_dim:
                raise CalibrationError(
                    f"sequence {i}: expected (T, {cfg.embed_dim}), got {seq.shape}"
                )


def synthetic_calibration(cfg: ModelConfig, seed: int, n_sequences: int = 4,
                          length: int = 24) -> CalibrationBatch:
    """Seeded Gaussian calibration inputs (mean 0, variance 1/d)."""
    if n_sequences < 1 or length < 2:
        raise CalibrationError("need n_sequences >= 1 and length >= 2")
    rng = np.random.default_rng(seed)
    scale = cfg.embed_dim ** -0.5
    seqs = tuple(
        rng.standard_normal((length, cfg.embed_dim)) * scale for _ in range(n_sequences)
    )
    return CalibrationBatch(sequences=seqs)


@dataclass(frozen=True)
class EliteSelection:
    """Chosen chunk sets per (layer, head), plus search bookkeeping.

    ``distances`` holds, per head, the L1 distance of each successive pick
    for the greedy search (length r), or a single final distance for the
    exhaustive search; it is None for calibration-free methods.
    """

    method: str
    r: int
    sets: tuple[tuple[ChunkSet, ...], ...]
    forward_passes: int = 0
    distances: tuple[tuple[tuple[float, ...], ...], ...] | None = None

    def __post_init__(self):
        for layer_sets in self.sets:
            for cs in layer_sets:
                if len(cs) != self.r:
                    raise SelectionError(
                        f"every per-head set must have exactly {self.r} chunks"
                    )

    def validate(self, cfg: ModelConfig) -> None:
        if len(self.sets) != cfg.n_layers:
            raise SelectionError(f"expected {cfg.n_layers} layers, got {len(self.sets)}")
        for layer_sets in self.sets:
            if len(layer_sets) != cfg.n_heads:
                raise SelectionError(
                    f"expected {cfg.n_heads} heads, got {len(layer_sets)}"
                )
            for cs in layer_sets:
                cs.check_bound(cfg.head_dim)

    def final_distances(self) -> np.ndarray | None:
        if self.distances is None:
            return None
        return np.array([[hd[-1] for hd in layer] for layer in self.distances])


def _check_rank(cfg: ModelConfig, r: int) -> int:
    r = int(r)
    if not 1 <= r <= cfg.head_dim // 2:
        raise RankError(f"r must be in [1, {cfg.head_dim // 2}], got {r}")
    return r


class _ScoreEngine:
    """Precomputed per-head projections plus a counted score-pass evaluator.

    One call to :meth:`distances` is one forward pass: it evaluates masked
    attention scores for every layer and head of the whole calibration batch
    under per-head chunk sets and accumulates L1 distance to the reference.
    """

    def __init__(self, cfg: ModelConfig, weights: AttentionWeights,
                 calib: CalibrationBatch, score_mode: str = "pre", threads: int = 1):
        if score_mode not in SCORE_MODES:
            raise SelectionError(f"score_mode must be one of {SCORE_MODES}")
        calib.validate(cfg)
        weights.validate(cfg)
        self.cfg = cfg
        self.score_mode = score_mode
        self.threads = max(1, int(threads))
        self.scale = cfg.head_dim ** -0.5
        self.passes = 0
        # Per sequence: (l, T, n_h, d_h) query and key tensors, before rotation.
        self.q: list[np.ndarray] = []
        self.k: list[np.ndarray] = []
        self.positions: list[np.ndarray] = []
        self.tril: list[tuple[np.ndarray, np.ndarray]] = []
        for seq in calib.sequences:
            t = seq.shape[0]
            q = np.empty((cfg.n_layers, t, cfg.n_heads, cfg.head_dim))
            k = np.empty_like(q)
            for li, lw in enumerate(weights.layers):
                q[li] = (seq @ lw.wq).reshape(t, cfg.n_heads, cfg.head_dim)
                k[li] = (seq @ lw.wk).reshape(t, cfg.n_heads, cfg.head_dim)
            self.q.append(q)
            self.k.append(k)
            self.positions.append(np.arange(t, dtype=np.float64))
            self.tril.append(np.tril_indices(t))

    def _head_scores(self, si: int, li: int, hi: int, chunks: ChunkSet) -> np.ndarray:
        pos = self.positions[si]
        qh = rotate_block(self.q[si][li, :, hi, :], pos, chunks, self.cfg.rope)
        kh = rotate_block(self.k[si][li, :, hi, :], pos, chunks, self.cfg.rope)
        s = (qh @ kh.T) * self.scale
        if self.score_mode == "post":
            t = s.shape[0]
            out = np.zeros_like(s)
            for m in range(t):
                row = s[m, : m + 1]
                e = np.exp(row - row.max())
                out[m, : m + 1] = e / e.sum()
            return out
        return s

    def reference(self) -> list[np.ndarray]:
        """Scores under full rotation; counts as one forward pass."""
        full = ChunkSet.full(self.cfg.head_dim)
        sets = [[full] * self.cfg.n_heads for _ in range(self.cfg.n_layers)]
        return self._evaluate(sets)

    def _evaluate(self, sets) -> list[np.ndarray]:
        self.passes += 1
        out = []
        for si in range(len(self.q)):
            t = self.q[si].shape[1]
            block = np.empty((self.cfg.n_layers, self.cfg.n_heads, t, t))

            def fill(li: int, si=si, block=block, sets=sets):
                for hi in range(self.cfg.n_heads):
                    block[li, hi] = self._head_scores(si, li, hi, sets[li][hi])

            if self.threads > 1 and self.cfg.n_layers > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    list(pool.map(fill, range(self.cfg.n_layers)))
            else:
                for li in range(self.cfg.n_layers):
                    fill(li)
            out.append(block)
        return out

    def distances(self, sets, reference: list[np.ndarray]) -> np.ndarray:
        """L1 distance to the reference per (layer, head); one forward pass."""
        cand = self._evaluate(sets)
        dist = np.zeros((self.cfg.n_layers, self.cfg.n_heads))
        for si, block in enumerate(cand):
            rows, cols = self.tril[si]
            diff = np.abs(block - reference[si])
            dist += diff[:, :, rows, cols].sum(axis=2)
        return dist


def ropelite_search(cfg: ModelConfig, weights: AttentionWeights, calib: CalibrationBatch,
                    r: int, *, score_mode: str = "pre", threads: int = 1) -> EliteSelection:
    """Greedy per-head selection of the r most influential rotation chunks.

    Each iteration scores every remaining candidate against the full-rotation
    reference, always rotating from the pristine projections so chunks are
    never rotated twice, and appends the argmin (ties to the smallest index).
    """
    r = _check_rank(cfg, r)
    engine = _ScoreEngine(cfg, weights, calib, score_mode, threads)
    ref = engine.reference()
    n_chunks = cfg.head_dim // 2
    picks = [[[] for _ in range(cfg.n_heads)] for _ in range(cfg.n_layers)]
    trace = [[[] for _ in range(cfg.n_heads)] for _ in range(cfg.n_layers)]
    for step in range(r):
        cands = [
            [sorted(set(range(n_chunks)) - set(picks[li][hi])) for hi in range(cfg.n_heads)]
            for li in range(cfg.n_layers)
        ]
        n_cand = n_chunks - step
        best = np.full((cfg.n_layers, cfg.n_heads), np.inf)
        best_j = np.zeros((cfg.n_layers, cfg.n_heads), dtype=int)
        for c in range(n_cand):
            sets = [
                [
                    ChunkSet.of(picks[li][hi] + [cands[li][hi][c]])
                    for hi in range(cfg.n_heads)
                ]
                for li in range(cfg.n_layers)
            ]
            dist = engine.distances(sets, ref)
            for li in range(cfg.n_layers):
                for hi in range(cfg.n_heads):
                    # Strict < with ascending candidates keeps the smallest
                    # index on ties.
                    if dist[li, hi] < best[li, hi]:
                        best[li, hi] = dist[li, hi]
                        best_j[li, hi] = cands[li][hi][c]
        for li in range(cfg.n_layers):
            for hi in range(cfg.n_heads):
                picks[li][hi].append(int(best_j[li, hi]))
                trace[li][hi].append(float(best[li, hi]))
    sets = tuple(
        tuple(ChunkSet.of(picks[li][hi]) for hi in range(cfg.n_heads))
        for li in range(cfg.n_layers)
    )
    dist_tuple = tuple(
        tuple(tuple(trace[li][hi]) for hi in range(cfg.n_heads))
        for li in range(cfg.n_layers)
    )
    return EliteSelection(
        method="ropelite", r=r, sets=sets,
        forward_passes=engine.passes, distances=dist_tuple,
    )


def exhaustive_search(cfg: ModelConfig, weights: AttentionWeights, calib: CalibrationBatch,
                      r: int, *, score_mode: str = "pre", threads: int = 1) -> EliteSelection:
    """Minimum-distance subset per head over every size-r chunk combination.

    Guarded to small search spaces; ties resolve to the lexicographically
    smallest subset because combinations are generated in lexicographic
    order and only strict improvements replace the incumbent.
    """
    r = _check_rank(cfg, r)
    n_chunks = cfg.head_dim // 2
    space = math.comb(n_chunks, r)
    if space > EXHAUSTIVE_GUARD:
        raise SearchSpaceError(
            f"search space C({n_chunks},{r}) = {space} exceeds guard {EXHAUSTIVE_GUARD}"
        )
    engine = _ScoreEngine(cfg, weights, calib, score_mode, threads)
    ref = engine.reference()
    best = np.full((cfg.n_layers, cfg.n_heads), np.inf)
    best_sets = [[None] * cfg.n_heads for _ in range(cfg.n_layers)]
    for combo in itertools.combinations(range(n_chunks), r):
        cs = ChunkSet(combo)
        sets = [[cs] * cfg.n_heads for _ in range(cfg.n_layers)]
        dist = engine.distances(sets, ref)
        for li in range(cfg.n_layers):
            for hi in range(cfg.n_heads):
                if dist[li, hi] < best[li, hi]:
                    best[li, hi] = dist[li, hi]
                    best_sets[li][hi] = cs
    sets = tuple(tuple(best_sets[li]) for li in range(cfg.n_layers))
    dist_tuple = tuple(
        tuple((float(best[li, hi]),) for hi in range(cfg.n_heads))
        for li in range(cfg.n_layers)
    )
    return EliteSelection(
        method="exhaustive", r=r, sets=sets,
        forward_passes=engine.passes, distances=dist_tuple,
    )


def uniform_select(cfg: ModelConfig, r: int) -> EliteSelection:
    """Evenly spaced chunk indices, identical for every head and layer."""
    r = _check_rank(cfg, r)
    n_chunks = cfg.head_dim // 2
    cs = ChunkSet(tuple(j * n_chunks // r for j in range(r)))
    sets = tuple(tuple(cs for _ in range(cfg.n_heads)) for _ in range(cfg.n_layers))
    return EliteSelection(method="uniform", r=r, sets=sets, forward_passes=0)


def contribution_select(cfg: ModelConfig, weights: AttentionWeights,
                        calib: CalibrationBatch, r: int) -> EliteSelection:
    """Top-r chunks by mean ||q_chunk|| * ||k_chunk|| over calibration tokens.

    Chunk norms are rotation-invariant, so the unrotated projections are
    scored directly. Ties go to the smaller chunk index.
    """
    r = _check_rank(cfg, r)
    calib.validate(cfg)
    weights.validate(cfg)
    n_chunks = cfg.head_dim // 2
    scores = np.zeros((cfg.n_layers, cfg.n_heads, n_chunks))
    total_tokens = 0
    for seq in calib.sequences:
        t = seq.shape[0]
        total_tokens += t
        for li, lw in enumerate(weights.layers):
            q = (seq @ lw.wq).reshape(t, cfg.n_heads, n_chunks, 2)
            k = (seq @ lw.wk).reshape(t, cfg.n_heads, n_chunks, 2)
            qn = np.linalg.norm(q, axis=3)
            kn = np.linalg.norm(k, axis=3)
            scores[li] += (qn * kn).sum(axis=0)
    scores /= total_tokens
    sets = []
    for li in range(cfg.n_layers):
        layer_sets = []
        for hi in range(cfg.n_heads):
            order = sorted(range(n_chunks), key=lambda i: (-scores[li, hi, i], i))
            layer_sets.append(ChunkSet.of(order[:r]))
        sets.append(tuple(layer_sets))
    return EliteSelection(
        method="contribution", r=r, sets=tuple(sets), forward_passes=1
    )


def expected_forward_passes(cfg: ModelConfig, r: int) -> int:
    """Closed-form pass count of the greedy search: 1 reference pass plus
    one pass per remaining candidate at each of the r iterations."""
    half = cfg.head_dim // 2
    return r * half - r * (r - 1) // 2 + 1
