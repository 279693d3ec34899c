"""Low-rank factorization of key/value projections and cost accounting.

The non-elite key columns and the full value projection are factorized
either separately (two SVD truncations with independent ranks) or jointly
(one truncation of their column concatenation, so keys and values share a
single cached latent). Cost formulas count parameters of the modified
key/value path and the per-token per-layer cache width.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import linalg
from .chunk_select import EliteSelection, uniform_select
from .errors import BudgetError, RankError, SelectionError, ValidationError
from .model import AttentionWeights, ModelConfig
from .rope import ChunkSet

MODES = ("jlrd", "slrd")


@dataclass(frozen=True)
class ColumnSplit:
    """Column index maps from the split matrices back into the original wk."""

    elite_cols: tuple[int, ...]
    rest_cols: tuple[int, ...]


def elite_column_split(sets: tuple[ChunkSet, ...], head_dim: int) -> ColumnSplit:
    """Partition per-head key columns by elite membership, head-major order."""
    elite, rest = [], []
    for h, cs in enumerate(sets):
        cs.check_bound(head_dim)
        base = h * head_dim
        for i in range(head_dim // 2):
            cols = (base + 2 * i, base + 2 * i + 1)
            (elite if i in cs else rest).extend(cols)
    return ColumnSplit(elite_cols=tuple(elite), rest_cols=tuple(rest))


def split_key_projection(wk: np.ndarray, elite: EliteSelection, layer: int
                         ) -> tuple[np.ndarray, np.ndarray, ColumnSplit]:
    """Split a key projection into elite and non-elite column blocks.

    Columns keep head order and within-head ascending chunk order; the
    returned split records the inverse mapping.
    """
    wk = linalg.ensure_matrix(wk, "wk")
    sets = elite.sets[layer]
    sizes = {len(cs) for layer_sets in elite.sets for cs in layer_sets}
    if sizes != {elite.r}:
        raise SelectionError(f"elite sets must all have size {elite.r}")
    head_dim = wk.shape[1] // len(sets)
    if head_dim * len(sets) != wk.shape[1]:
        raise SelectionError(
            f"wk width {wk.shape[1]} not divisible into {len(sets)} heads"
        )
    split = elite_column_split(sets, head_dim)
    wk_elite = wk[:, list(split.elite_cols)]
    wk_rest = wk[:, list(split.rest_cols)]
    return wk_elite, wk_rest, split


@dataclass(frozen=True)
class LowRankFactors:
    """Down/up-projection factors for one layer.

    Joint mode keeps a single up-projection ``b_joint`` whose first
    rest-width columns reconstruct non-elite keys and whose remaining
    columns reconstruct values, so ``b_k`` and ``b_v`` are contiguous blocks
    of the same matrix.
    """

    mode: str
    elite_r: int
    n_heads: int
    head_dim: int
    a_kv: np.ndarray | None = None      # jlrd: (d, d_ckv)
    b_joint: np.ndarray | None = None   # jlrd: (d_ckv, rest_width + kv_width)
    a_k: np.ndarray | None = None       # slrd: (d, d_ck)
    b_k_sep: np.ndarray | None = None   # slrd: (d_ck, rest_width)
    a_v: np.ndarray | None = None       # slrd: (d, d_cv)
    b_v_sep: np.ndarray | None = None   # slrd: (d_cv, kv_width)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        rw, vw = self.rest_width, self.n_heads * self.head_dim
        if self.mode == "jlrd":
            if self.a_kv is None or self.b_joint is None:
                raise ValidationError("jlrd factors need a_kv and b_joint")
            if self.b_joint.shape != (self.a_kv.shape[1], rw + vw):
                raise ValidationError(
                    f"b_joint shape {self.b_joint.shape} != "
                    f"({self.a_kv.shape[1]}, {rw + vw})"
                )
        else:
            if self.a_k is None or self.b_k_sep is None or self.a_v is None \
                    or self.b_v_sep is None:
                raise ValidationError("slrd factors need a_k, b_k, a_v, b_v")
            if self.b_k_sep.shape != (self.a_k.shape[1], rw):
                raise ValidationError("slrd key factor widths inconsistent")
            if self.b_v_sep.shape != (self.a_v.shape[1], vw):
                raise ValidationError("slrd value factor widths inconsistent")

    @property
    def rest_width(self) -> int:
        return (self.head_dim - 2 * self.elite_r) * self.n_heads

    @property
    def b_k(self) -> np.ndarray:
        if self.mode == "jlrd":
            return self.b_joint[:, : self.rest_width]
        return self.b_k_sep

    @property
    def b_v(self) -> np.ndarray:
        if self.mode == "jlrd":
            return self.b_joint[:, self.rest_width:]
        return self.b_v_sep

    @property
    def d_ckv(self) -> int:
        return self.a_kv.shape[1] if self.mode == "jlrd" else 0

    @property
    def d_ck(self) -> int:
        return self.a_k.shape[1] if self.mode == "slrd" else 0

    @property
    def d_cv(self) -> int:
        return self.a_v.shape[1] if self.mode == "slrd" else 0

    @property
    def latent_width(self) -> int:
        """Cached latent floats per token for this layer."""
        return self.d_ckv if self.mode == "jlrd" else self.d_ck + self.d_cv


def _check_concat_inputs(wk_rest, wv, cfg: ModelConfig, elite_r: int):
    wk_rest = linalg.ensure_matrix(wk_rest, "wk_rest", allow_empty=True)
    wv = linalg.ensure_matrix(wv, "wv")
    rest_width = (cfg.head_dim - 2 * elite_r) * cfg.n_heads
    if wk_rest.shape != (cfg.embed_dim, rest_width):
        raise ValidationError(
            f"wk_rest shape {wk_rest.shape} != ({cfg.embed_dim}, {rest_width})"
        )
    if wv.shape != (cfg.embed_dim, cfg.kv_width):
        raise ValidationError(f"wv shape {wv.shape} != ({cfg.embed_dim}, {cfg.kv_width})")
    return wk_rest, wv


def decompose_jlrd(wk_rest, wv, d_ckv: int, *, cfg: ModelConfig,
                   elite_r: int) -> LowRankFactors:
    """Joint truncation of [wk_rest | wv]; the up-projection splits in place."""
    wk_rest, wv = _check_concat_inputs(wk_rest, wv, cfg, elite_r)
    concat = np.concatenate([wk_rest, wv], axis=1)
    max_rank = min(concat.shape)
    if not 1 <= int(d_ckv) <= max_rank:
        raise RankError(f"d_ckv {d_ckv} outside [1, {max_rank}]")
    a, b = linalg.truncated_factors(concat, int(d_ckv))
    return LowRankFactors(
        mode="jlrd", elite_r=elite_r, n_heads=cfg.n_heads, head_dim=cfg.head_dim,
        a_kv=a, b_joint=b,
    )


def decompose_slrd(wk_rest, wv, d_ck: int, d_cv: int, *, cfg: ModelConfig,
                   elite_r: int) -> LowRankFactors:
    """Two independent truncations with per-matrix ranks."""
    wk_rest, wv = _check_concat_inputs(wk_rest, wv, cfg, elite_r)
    d_ck, d_cv = int(d_ck), int(d_cv)
    if wk_rest.shape[1] == 0:
        if d_ck != 0:
            raise RankError("wk_rest has no columns; d_ck must be 0")
        a_k = np.zeros((cfg.embed_dim, 0))
        b_k = np.zeros((0, 0))
    else:
        max_k = min(wk_rest.shape)
        if not 1 <= d_ck <= max_k:
            raise RankError(f"d_ck {d_ck} outside [1, {max_k}]")
        a_k, b_k = linalg.truncated_factors(wk_rest, d_ck)
    max_v = min(wv.shape)
    if not 1 <= d_cv <= max_v:
        raise RankError(f"d_cv {d_cv} outside [1, {max_v}]")
    a_v, b_v = linalg.truncated_factors(wv, d_cv)
    return LowRankFactors(
        mode="slrd", elite_r=elite_r, n_heads=cfg.n_heads, head_dim=cfg.head_dim,
        a_k=a_k, b_k_sep=b_k, a_v=a_v, b_v_sep=b_v,
    )


def reassemble(factors: LowRankFactors, split: ColumnSplit, wk_elite: np.ndarray,
               cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild approximations of the original wk and wv from the factors."""
    wk_hat = np.zeros((cfg.embed_dim, cfg.kv_width))
    wk_hat[:, list(split.elite_cols)] = wk_elite
    if factors.rest_width:
        a = factors.a_kv if factors.mode == "jlrd" else factors.a_k
        wk_hat[:, list(split.rest_cols)] = a @ factors.b_k
    a_v = factors.a_kv if factors.mode == "jlrd" else factors.a_v
    wv_hat = a_v @ factors.b_v
    return wk_hat, wv_hat


@dataclass(frozen=True)
class CostReport:
    """Parameter and cache accounting for one decomposition setting."""

    params_original: int
    params_after: int
    cache_per_token_layer: int
    cache_ratio: Fraction


def _original_params(cfg: ModelConfig) -> int:
    # Key and value projections of the unmodified layer.
    return 2 * cfg.embed_dim * cfg.kv_width


def cost_slrd(cfg: ModelConfig, r: int, d_ck: int, d_cv: int) -> CostReport:
    """Storage cost of the separated decomposition at d == head_dim * n_heads."""
    d, nh = cfg.embed_dim, cfg.n_heads
    params = (2 * d_ck + 2 * d_cv + 2 * r * nh) * d - 2 * d_ck * r * nh
    cache = 2 * r * nh + d_ck + d_cv
    return CostReport(
        params_original=_original_params(cfg),
        params_after=int(params),
        cache_per_token_layer=int(cache),
        cache_ratio=Fraction(int(cache), cfg.full_cache_width),
    )


def cost_jlrd(cfg: ModelConfig, r: int, d_ckv: int) -> CostReport:
    """Storage cost of the joint decomposition at d == head_dim * n_heads."""
    d, nh = cfg.embed_dim, cfg.n_heads
    params = 2 * r * nh * d + 3 * d_ckv * d - 2 * d_ckv * r * nh
    cache = 2 * r * nh + d_ckv
    return CostReport(
        params_original=_original_params(cfg),
        params_after=int(params),
        cache_per_token_layer=int(cache),
        cache_ratio=Fraction(int(cache), cfg.full_cache_width),
    )


def allocate_slrd_split(wk_rest, wv, cache_budget: int, r: int,
                        cfg: ModelConfig) -> tuple[int, int]:
    """Greedy (d_ck, d_cv) split for a fixed per-token cache budget.

    Starting from (1, 1), each step grants a rank to whichever side's next
    discarded singular value carries more squared energy (key side wins
    ties), until the cache width formula meets the budget exactly.
    """
    wk_rest, wv = _check_concat_inputs(wk_rest, wv, cfg, r)
    if wk_rest.shape[1] == 0:
        raise BudgetError("key side has no columns to allocate; use r < head_dim/2")
    base = 2 * r * cfg.n_heads
    if cache_budget < base + 2:
        raise BudgetError(f"cache budget {cache_budget} below minimum {base + 2}")
    sig_k = linalg.svd(wk_rest).sigma
    sig_v = linalg.svd(wv).sigma
    max_k = min(wk_rest.shape)
    max_v = min(wv.shape)
    total = cache_budget - base
    if total > max_k + max_v:
        raise BudgetError(
            f"cache budget {cache_budget} exceeds maximum {base + max_k + max_v}"
        )
    d_ck, d_cv = 1, 1
    while d_ck + d_cv < total:
        gain_k = float(sig_k[d_ck] ** 2) if d_ck < len(sig_k) else 0.0
        gain_v = float(sig_v[d_cv] ** 2) if d_cv < len(sig_v) else 0.0
        can_k = d_ck < max_k
        can_v = d_cv < max_v
        if can_k and (not can_v or gain_k >= gain_v):
            d_ck += 1
        else:
            d_cv += 1
    return d_ck, d_cv


@dataclass(frozen=True)
class AllocationCandidate:
    """One feasible (r, d_ckv) setting of the joint decomposition."""

    r: int
    d_ckv: int
    cache_per_token_layer: int
    cache_ratio: Fraction
    params_after: int
    params_original: int
    identity: bool = False
    proxy_score: float | None = None


def _feasible_configs(cfg: ModelConfig, alignment: int):
    """All aligned (r, d_ckv) settings that do not add parameters.

    The degenerate setting (r = head_dim/2, d_ckv = 0) stands for the
    unmodified model: nothing is factorized, values are cached raw, so its
    cache width is the full width and its parameter count is the original.
    """
    d = cfg.embed_dim
    out = []
    for r in range(cfg.head_dim // 2 + 1):
        u = 2 * r * cfg.n_heads
        if r == cfg.head_dim // 2:
            out.append(AllocationCandidate(
                r=r, d_ckv=0,
                cache_per_token_layer=cfg.full_cache_width,
                cache_ratio=Fraction(1, 1),
                params_after=_original_params(cfg),
                params_original=_original_params(cfg),
                identity=True,
            ))
        max_ckv = min(d, cfg.full_cache_width - u)
        for d_ckv in range(alignment, max_ckv + 1, alignment):
            cost = cost_jlrd(cfg, r, d_ckv)
            if cost.params_after <= cost.params_original:
                out.append(AllocationCandidate(
                    r=r, d_ckv=d_ckv,
                    cache_per_token_layer=cost.cache_per_token_layer,
                    cache_ratio=cost.cache_ratio,
                    params_after=cost.params_after,
                    params_original=cost.params_original,
                ))
    return out


def _frobenius_proxy(cfg: ModelConfig, weights: AttentionWeights,
                     candidates, selection_method: str, calib):
    """Total truncation error across layers, from tail singular values."""
    from .chunk_select import contribution_select, ropelite_search

    tails: dict[int, list[np.ndarray]] = {}
    scores = {}
    for cand in candidates:
        if cand.identity:
            scores[(cand.r, cand.d_ckv)] = 0.0
            continue
        if cand.r not in tails:
            if cand.r == 0:
                sel = None
            elif selection_method == "uniform":
                sel = uniform_select(cfg, cand.r)
            elif selection_method == "contribution":
                sel = contribution_select(cfg, weights, calib, cand.r)
            elif selection_method == "ropelite":
                sel = ropelite_search(cfg, weights, calib, cand.r)
            else:
                raise ValidationError(f"unknown selection method {selection_method!r}")
            layer_sigmas = []
            for li, lw in enumerate(weights.layers):
                if sel is None:
                    rest = lw.wk
                else:
                    _, rest, _ = split_key_projection(lw.wk, sel, li)
                concat = np.concatenate([rest, lw.wv], axis=1)
                layer_sigmas.append(linalg.svd(concat).sigma)
            tails[cand.r] = layer_sigmas
        total = 0.0
        for sig in tails[cand.r]:
            total += float((sig[cand.d_ckv:] ** 2).sum())
        scores[(cand.r, cand.d_ckv)] = float(np.sqrt(total))
    return scores


def perplexity_proxy(hidden: np.ndarray, tokens: np.ndarray) -> float:
    """Exponentiated per-dimension Gaussian loss of next-embedding prediction.

    ``hidden[t]`` is scored as a predictor of ``tokens[t + 1]``; lower is
    better. This is the desk-scale stand-in for holdout perplexity.
    """
    if hidden.shape[0] < 2:
        raise ValidationError("need at least 2 steps for the perplexity proxy")
    err = hidden[:-1] - tokens[1:]
    nll = 0.5 * float(np.mean(err * err))
    return float(np.exp(nll))


def _perplexity_proxy_scores(cfg, weights, candidates, selection_method, calib,
                             holdout_seed: int):
    from . import attention
    from .chunk_select import contribution_select, ropelite_search
    from .model import random_tokens

    tokens = random_tokens(cfg, holdout_seed, 32)
    scores = {}
    sel_cache: dict[int, EliteSelection | None] = {}
    for cand in candidates:
        if cand.identity:
            outs = attention.forward_full(cfg, weights, tokens, residual=True)
            hidden = np.stack([o.hidden for o in outs])
            scores[(cand.r, cand.d_ckv)] = perplexity_proxy(hidden, tokens)
            continue
        if cand.r not in sel_cache:
            if cand.r == 0:
                empty = ChunkSet.empty()
                sel_cache[cand.r] = EliteSelection(
                    method=selection_method, r=0,
                    sets=tuple(tuple(empty for _ in range(cfg.n_heads))
                               for _ in range(cfg.n_layers)),
                )
            elif selection_method == "uniform":
                sel_cache[cand.r] = uniform_select(cfg, cand.r)
            elif selection_method == "contribution":
                sel_cache[cand.r] = contribution_select(cfg, weights, calib, cand.r)
            elif selection_method == "ropelite":
                sel_cache[cand.r] = ropelite_search(cfg, weights, calib, cand.r)
            else:
                raise ValidationError(f"unknown selection method {selection_method!r}")
        cmodel = attention.compress_model(
            cfg, weights, sel_cache[cand.r], mode="jlrd", d_ckv=cand.d_ckv
        )
        outs = attention.forward_compressed(cfg, cmodel, tokens, residual=True)
        hidden = np.stack([o.hidden for o in outs])
        scores[(cand.r, cand.d_ckv)] = perplexity_proxy(hidden, tokens)
    return scores


def allocate_configs(cfg: ModelConfig, target_ratio: float, alignment: int = 1,
                     proxy: str = "frobenius", *, tolerance: float = 0.0,
                     weights: AttentionWeights | None = None, calib=None,
                     selection_method: str = "uniform", holdout_seed: int = 0,
                     ) -> list[AllocationCandidate]:
    """Feasible aligned (r, d_ckv) settings at a target cache ratio, ranked.

    Feasibility: d_ckv is a multiple of ``alignment``, the cache width
    matches round(target_ratio * full width) (or sits within ``tolerance``
    of the target ratio when tolerance > 0), and the parameter count does
    not exceed the original. With ``weights`` the list is ranked ascending
    by proxy score; without weights it is returned in enumeration order
    with no scores. Raises BudgetError listing the nearest achievable
    ratios when nothing qualifies.
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ValidationError(f"target_ratio must be in (0, 1], got {target_ratio}")
    if alignment < 1:
        raise ValidationError("alignment must be >= 1")
    if proxy not in ("frobenius", "perplexity"):
        raise ValidationError(f"unknown proxy {proxy!r}")
    everything = _feasible_configs(cfg, alignment)
    full = cfg.full_cache_width
    if tolerance > 0.0:
        chosen = [
            c for c in everything
            if abs(c.cache_per_token_layer / full - target_ratio) <= tolerance
        ]
    else:
        want = int(round(target_ratio * full))
        chosen = [c for c in everything if c.cache_per_token_layer == want]
    if not chosen:
        ratios = sorted(
            {c.cache_ratio for c in everything},
            key=lambda rt: (abs(float(rt) - target_ratio), rt),
        )
        raise BudgetError(
            f"no feasible configuration at ratio {target_ratio}; nearest "
            f"achievable ratios: {[str(rt) for rt in ratios[:5]]}",
            nearest=ratios[:5],
        )
    if weights is None:
        return sorted(chosen, key=lambda c: (c.r, c.d_ckv))
    if proxy == "frobenius":
        scores = _frobenius_proxy(cfg, weights, chosen, selection_method, calib)
    else:
        scores = _perplexity_proxy_scores(
            cfg, weights, chosen, selection_method, calib, holdout_seed
        )
    scored = [
        AllocationCandidate(
            r=c.r, d_ckv=c.d_ckv, cache_per_token_layer=c.cache_per_token_layer,
            cache_ratio=c.cache_ratio, params_after=c.params_after,
            params_original=c.params_original, identity=c.identity,
            proxy_score=scores[(c.r, c.d_ckv)],
        )
        for c in chosen
    ]
    return sorted(scored, key=lambda c: (c.proxy_score, c.r, c.d_ckv))
