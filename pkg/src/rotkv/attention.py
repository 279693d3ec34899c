"""Multi-head attention decoding over three interchangeable cache layouts.

``full`` caches fully rotated keys plus raw values. ``ropelite`` caches keys
with only each head's elite chunks rotated (the rest raw) plus raw values,
which keeps the same width. ``compressed`` caches rotated elite key chunks
plus a low-rank latent from which non-elite keys and values are recovered on
the fly: the key up-projection is absorbed into the query path and the value
up-projection into the output projection, so cached entries are never
re-rotated or widened after insertion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chunk_select import EliteSelection
from .errors import CacheLayoutError, ShapeError, ValidationError
from .lowrank import LowRankFactors, decompose_jlrd, decompose_slrd, split_key_projection
from .model import AttentionWeights, ModelConfig
from .rope import ChunkSet, frequencies, rotate_block

LAYOUTS = ("full", "ropelite", "compressed")

RMS_EPS = 1e-6


@dataclass(frozen=True)
class DecodeOutput:
    """Hidden state after one decode step; optional per-head softmax rows."""

    hidden: np.ndarray
    scores: np.ndarray | None = None


@dataclass
class KVCacheStore:
    """Per-layer, token-indexed cache rows for one decode stream.

    Row widths are fixed by the layout: key_width + value_width +
    latent_width floats per token per layer. One writer appends a row to
    every layer per step; reads between steps are safe.
    """

    layout: str
    n_layers: int
    key_width: int
    value_width: int
    latent_width: int
    elite: EliteSelection | None = None
    factors: tuple[LowRankFactors, ...] | None = None
    _keys: list[list[np.ndarray]] = field(default_factory=list, repr=False)
    _values: list[list[np.ndarray]] = field(default_factory=list, repr=False)
    _latents: list[list[np.ndarray]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise CacheLayoutError(f"unknown layout {self.layout!r}")
        self._keys = [[] for _ in range(self.n_layers)]
        self._values = [[] for _ in range(self.n_layers)]
        self._latents = [[] for _ in range(self.n_layers)]

    @classmethod
    def full(cls, cfg: ModelConfig) -> "KVCacheStore":
        return cls("full", cfg.n_layers, cfg.kv_width, cfg.kv_width, 0)

    @classmethod
    def ropelite(cls, cfg: ModelConfig, elite: EliteSelection) -> "KVCacheStore":
        elite.validate(cfg)
        return cls("ropelite", cfg.n_layers, cfg.kv_width, cfg.kv_width, 0, elite=elite)

    @classmethod
    def compressed(cls, cfg: ModelConfig, elite: EliteSelection,
                   factors: tuple[LowRankFactors, ...]) -> "KVCacheStore":
        elite.validate(cfg)
        if len(factors) != cfg.n_layers:
            raise CacheLayoutError("one factor set per layer required")
        return cls(
            "compressed", cfg.n_layers, 2 * elite.r * cfg.n_heads, 0,
            factors[0].latent_width, elite=elite, factors=factors,
        )

    @property
    def tokens(self) -> int:
        return len(self._keys[0])

    def width_per_token_layer(self) -> int:
        return self.key_width + self.value_width + self.latent_width

    def append(self, layer: int, key_row: np.ndarray,
               value_row: np.ndarray | None = None,
               latent_row: np.ndarray | None = None) -> None:
        if key_row.shape != (self.key_width,):
            raise ShapeError(f"key row width {key_row.shape} != ({self.key_width},)")
        self._keys[layer].append(key_row)
        if self.value_width:
            if value_row is None or value_row.shape != (self.value_width,):
                raise ShapeError("value row missing or mis-sized")
            self._values[layer].append(value_row)
        if self.latent_width:
            if latent_row is None or latent_row.shape != (self.latent_width,):
                raise ShapeError("latent row missing or mis-sized")
            self._latents[layer].append(latent_row)

    def keys(self, layer: int) -> np.ndarray:
        return np.vstack(self._keys[layer])

    def values(self, layer: int) -> np.ndarray:
        return np.vstack(self._values[layer])

    def latents(self, layer: int) -> np.ndarray:
        return np.vstack(self._latents[layer])


def cache_bytes(cache: KVCacheStore, t: int | None = None,
                bytes_per_element: int = 8) -> int:
    """Exact cache footprint for t tokens: layers * t * width * element size."""
    if t is None:
        t = cache.tokens
    return cache.n_layers * int(t) * cache.width_per_token_layer() * bytes_per_element


def _softmax(row: np.ndarray) -> np.ndarray:
    e = np.exp(row - row.max())
    return e / e.sum()


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x) + RMS_EPS)


def _check_token(x, cfg: ModelConfig) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (cfg.embed_dim,):
        raise ShapeError(f"token embedding shape {arr.shape} != ({cfg.embed_dim},)")
    return arr


def _check_layout(cache: KVCacheStore, layout: str) -> None:
    if cache.layout != layout:
        raise CacheLayoutError(f"cache layout {cache.layout!r}, expected {layout!r}")


def _attend(cfg: ModelConfig, cache: KVCacheStore, layer: int, q_heads: np.ndarray,
            want_scores: bool):
    """Score cached keys against per-head queries and mix cached values."""
    scale = cfg.head_dim ** -0.5
    keys = cache.keys(layer)
    vals = cache.values(layer)
    mixed = np.empty(cfg.kv_width)
    rows = np.empty((cfg.n_heads, keys.shape[0])) if want_scores else None
    for h in range(cfg.n_heads):
        hs = cfg.head_slice(h)
        p = _softmax((keys[:, hs] @ q_heads[h]) * scale)
        mixed[hs] = p @ vals[:, hs]
        if want_scores:
            rows[h] = p
    return mixed, rows


def decode_step_full(cfg: ModelConfig, weights: AttentionWeights, cache: KVCacheStore,
                     x, *, residual: bool = False,
                     want_scores: bool = False) -> DecodeOutput:
    """One decode step with fully rotated cached keys and raw cached values."""
    _check_layout(cache, "full")
    x = _check_token(x, cfg)
    pos = float(cache.tokens)
    pos_rows = np.full(cfg.n_heads, pos)
    full_set = ChunkSet.full(cfg.head_dim)
    h_stream = x
    all_scores = [] if want_scores else None
    for layer, lw in enumerate(weights.layers):
        inp = _rms_norm(h_stream) if residual else h_stream
        q = (inp @ lw.wq).reshape(cfg.n_heads, cfg.head_dim)
        k = (inp @ lw.wk).reshape(cfg.n_heads, cfg.head_dim)
        v = inp @ lw.wv
        q = rotate_block(q, pos_rows, full_set, cfg.rope)
        k = rotate_block(k, pos_rows, full_set, cfg.rope)
        cache.append(layer, k.reshape(-1), v)
        mixed, rows = _attend(cfg, cache, layer, q, want_scores)
        out = mixed @ lw.wo
        h_stream = h_stream + out if residual else out
        if want_scores:
            all_scores.append(rows)
    return DecodeOutput(
        hidden=h_stream, scores=np.stack(all_scores) if want_scores else None
    )


def decode_step_ropelite(cfg: ModelConfig, weights: AttentionWeights,
                         elite: EliteSelection, cache: KVCacheStore, x, *,
                         residual: bool = False,
                         want_scores: bool = False) -> DecodeOutput:
    """One decode step rotating only each head's elite chunks.

    Cached key rows carry rotated elite chunks and untouched non-elite
    chunks side by side, so the plain dot against a query prepared the same
    way realizes the mixed rotated/unrotated score.
    """
    _check_layout(cache, "ropelite")
    x = _check_token(x, cfg)
    elite.validate(cfg)
    pos = float(cache.tokens)
    h_stream = x
    all_scores = [] if want_scores else None
    for layer, lw in enumerate(weights.layers):
        inp = _rms_norm(h_stream) if residual else h_stream
        q = (inp @ lw.wq).reshape(cfg.n_heads, cfg.head_dim).copy()
        k = (inp @ lw.wk).reshape(cfg.n_heads, cfg.head_dim).copy()
        v = inp @ lw.wv
        for h in range(cfg.n_heads):
            cs = elite.sets[layer][h]
            q[h] = rotate_block(q[h][None, :], [pos], cs, cfg.rope)[0]
            k[h] = rotate_block(k[h][None, :], [pos], cs, cfg.rope)[0]
        cache.append(layer, k.reshape(-1), v)
        mixed, rows = _attend(cfg, cache, layer, q, want_scores)
        out = mixed @ lw.wo
        h_stream = h_stream + out if residual else out
        if want_scores:
            all_scores.append(rows)
    return DecodeOutput(
        hidden=h_stream, scores=np.stack(all_scores) if want_scores else None
    )


@dataclass(frozen=True)
class CompressedLayer:
    """Per-layer weights after factorization and absorption.

    ``wq_absorbed[h]`` maps the input straight to the key-latent space
    (query rest-columns composed with the key up-projection), and
    ``wvo_absorbed[h]`` maps a value latent straight to the output embedding
    (value up-projection composed with the output projection rows).
    """

    factors: LowRankFactors
    split: "object"
    wq_elite: np.ndarray      # (d, 2r*n_h)
    wk_elite: np.ndarray      # (d, 2r*n_h)
    wq_absorbed: np.ndarray   # (n_h, d, key latent width)
    wvo_absorbed: np.ndarray  # (n_h, value latent width, d)


@dataclass(frozen=True)
class CompressedModel:
    cfg: ModelConfig
    elite: EliteSelection
    mode: str
    layers: tuple[CompressedLayer, ...]

    def new_cache(self) -> KVCacheStore:
        return KVCacheStore.compressed(
            self.cfg, self.elite, tuple(l.factors for l in self.layers)
        )


def assemble_compressed(cfg: ModelConfig, weights: AttentionWeights,
                        elite: EliteSelection,
                        factors: tuple[LowRankFactors, ...]) -> CompressedModel:
    """Build the decode-ready model from existing per-layer factors."""
    weights.validate(cfg)
    elite.validate(cfg)
    if len(factors) != cfg.n_layers:
        raise ValidationError("one factor set per layer required")
    rest_per_head = cfg.head_dim - 2 * elite.r
    layers = []
    for li, lw in enumerate(weights.layers):
        f = factors[li]
        if f.elite_r != elite.r:
            raise ValidationError("factor elite rank does not match the selection")
        wk_elite, _, split = split_key_projection(lw.wk, elite, li)
        wq_elite = lw.wq[:, list(split.elite_cols)]
        wq_rest = lw.wq[:, list(split.rest_cols)]
        k_lat = f.d_ckv if f.mode == "jlrd" else f.d_ck
        v_lat = f.d_ckv if f.mode == "jlrd" else f.d_cv
        wq_abs = np.zeros((cfg.n_heads, cfg.embed_dim, k_lat))
        wvo_abs = np.zeros((cfg.n_heads, v_lat, cfg.embed_dim))
        for h in range(cfg.n_heads):
            rest_block = slice(h * rest_per_head, (h + 1) * rest_per_head)
            wq_abs[h] = wq_rest[:, rest_block] @ f.b_k[:, rest_block].T
            wvo_abs[h] = f.b_v[:, cfg.head_slice(h)] @ lw.wo[cfg.head_slice(h), :]
        layers.append(CompressedLayer(
            factors=f, split=split, wq_elite=wq_elite, wk_elite=wk_elite,
            wq_absorbed=wq_abs, wvo_absorbed=wvo_abs,
        ))
    return CompressedModel(cfg=cfg, elite=elite, mode=factors[0].mode,
                           layers=tuple(layers))


def compress_model(cfg: ModelConfig, weights: AttentionWeights, elite: EliteSelection,
                   mode: str = "jlrd", *, d_ckv: int | None = None,
                   d_ck: int | None = None, d_cv: int | None = None) -> CompressedModel:
    """Factorize each layer's key/value path and pre-absorb the up-projections."""
    weights.validate(cfg)
    elite.validate(cfg)
    factors = []
    for li, lw in enumerate(weights.layers):
        _, wk_rest, _ = split_key_projection(lw.wk, elite, li)
        if mode == "jlrd":
            if d_ckv is None:
                raise ValidationError("jlrd mode needs d_ckv")
            factors.append(
                decompose_jlrd(wk_rest, lw.wv, d_ckv, cfg=cfg, elite_r=elite.r)
            )
        elif mode == "slrd":
            if d_ck is None or d_cv is None:
                raise ValidationError("slrd mode needs d_ck and d_cv")
            factors.append(
                decompose_slrd(wk_rest, lw.wv, d_ck, d_cv, cfg=cfg, elite_r=elite.r)
            )
        else:
            raise ValidationError(f"unknown mode {mode!r}")
    return assemble_compressed(cfg, weights, elite, tuple(factors))


def _rotate_elite_row(row: np.ndarray, pos: float, sets, cfg: ModelConfig) -> np.ndarray:
    """Rotate compacted elite chunk pairs, each by its own chunk frequency."""
    out = row.copy()
    r = len(sets[0])
    if r == 0:
        return out
    theta = frequencies(cfg.rope)
    width = 2 * r
    for h, cs in enumerate(sets):
        idx = np.fromiter(cs, dtype=np.intp)
        ang = pos * theta[idx]
        c, s = np.cos(ang), np.sin(ang)
        base = h * width
        x = out[base: base + width: 2].copy()
        y = out[base + 1: base + width: 2].copy()
        out[base: base + width: 2] = x * c - y * s
        out[base + 1: base + width: 2] = x * s + y * c
    return out


def decode_step_compressed(cfg: ModelConfig, cmodel: CompressedModel,
                           cache: KVCacheStore, x, *, residual: bool = False,
                           want_scores: bool = False) -> DecodeOutput:
    """One decode step against cached elite keys plus shared latents.

    Inserts [rotated elite key chunks | input @ down-projection] and never
    touches previously cached rows; non-elite key scores come from the
    absorbed query path against the latents, and values are mixed in latent
    space before the absorbed output projection.
    """
    _check_layout(cache, "compressed")
    x = _check_token(x, cfg)
    scale = cfg.head_dim ** -0.5
    pos = float(cache.tokens)
    elite_width = 2 * cmodel.elite.r
    h_stream = x
    all_scores = [] if want_scores else None
    for layer, lay in enumerate(cmodel.layers):
        inp = _rms_norm(h_stream) if residual else h_stream
        sets = cmodel.elite.sets[layer]
        q_e = _rotate_elite_row(inp @ lay.wq_elite, pos, sets, cfg)
        k_e = _rotate_elite_row(inp @ lay.wk_elite, pos, sets, cfg)
        f = lay.factors
        if f.mode == "jlrd":
            lat = inp @ f.a_kv
        else:
            lat = np.concatenate([inp @ f.a_k, inp @ f.a_v])
        cache.append(layer, k_e, latent_row=lat)
        keys = cache.keys(layer)
        lats = cache.latents(layer)
        if f.mode == "jlrd":
            lat_k = lats
            lat_v = lats
        else:
            lat_k = lats[:, : f.d_ck]
            lat_v = lats[:, f.d_ck:]
        out = np.zeros(cfg.embed_dim)
        rows = np.empty((cfg.n_heads, keys.shape[0])) if want_scores else None
        for h in range(cfg.n_heads):
            es = slice(h * elite_width, (h + 1) * elite_width)
            s = keys[:, es] @ q_e[es] + lat_k @ (inp @ lay.wq_absorbed[h])
            p = _softmax(s * scale)
            out += (p @ lat_v) @ lay.wvo_absorbed[h]
            if want_scores:
                rows[h] = p
        h_stream = h_stream + out if residual else out
        if want_scores:
            all_scores.append(rows)
    return DecodeOutput(
        hidden=h_stream, scores=np.stack(all_scores) if want_scores else None
    )


def _run(step, cfg: ModelConfig, tokens, cache: KVCacheStore, **kwargs):
    arr = np.asarray(tokens, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != cfg.embed_dim:
        raise ShapeError(f"tokens: expected (T, {cfg.embed_dim}), got {arr.shape}")
    return [step(arr[t], cache, **kwargs) for t in range(arr.shape[0])]


def forward_full(cfg: ModelConfig, weights: AttentionWeights, tokens, *,
                 residual: bool = False, want_scores: bool = False,
                 cache: KVCacheStore | None = None) -> list[DecodeOutput]:
    """Token-by-token decode with the full cache layout."""
    weights.validate(cfg)
    cache = cache or KVCacheStore.full(cfg)
    return _run(
        lambda x, c: decode_step_full(cfg, weights, c, x, residual=residual,
                                      want_scores=want_scores),
        cfg, tokens, cache,
    )


def forward_ropelite(cfg: ModelConfig, weights: AttentionWeights,
                     elite: EliteSelection, tokens, *, residual: bool = False,
                     want_scores: bool = False,
                     cache: KVCacheStore | None = None) -> list[DecodeOutput]:
    """Token-by-token decode rotating only elite chunks per head."""
    weights.validate(cfg)
    cache = cache or KVCacheStore.ropelite(cfg, elite)
    return _run(
        lambda x, c: decode_step_ropelite(cfg, weights, elite, c, x,
                                          residual=residual, want_scores=want_scores),
        cfg, tokens, cache,
    )


def forward_compressed(cfg: ModelConfig, cmodel: CompressedModel, tokens, *,
                       residual: bool = False, want_scores: bool = False,
                       cache: KVCacheStore | None = None) -> list[DecodeOutput]:
    """Token-by-token decode against the compressed cache."""
    cache = cache or cmodel.new_cache()
    return _run(
        lambda x, c: decode_step_compressed(cfg, cmodel, c, x, residual=residual,
                                            want_scores=want_scores),
        cfg, tokens, cache,
    )
