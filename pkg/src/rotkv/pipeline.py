"""End-to-end orchestration: generate, select, decompose, simulate, verify.

A run manifest pins every knob (seed, shape, method, ranks, paths) so reruns
produce byte-identical artifacts. Reports contain no timestamps, hostnames,
or thread counts for the same reason. Sub-seeds are derived with fixed
offsets: seed for model weights, seed+1 for calibration data, seed+2 for
decode tokens.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attention, formats, linalg, lowrank
from .chunk_select import (
    CalibrationBatch,
    EliteSelection,
    contribution_select,
    exhaustive_search,
    ropelite_search,
    synthetic_calibration,
    uniform_select,
)
from .errors import FormatError, ToolError, ValidationError
from .model import AttentionWeights, ModelConfig, random_tokens, random_weights
from .rope import ChunkSet, relative_score, rotate

SUITES = ("rope-identity", "eckart-young", "greedy-oracle", "decode-equivalence",
          "accounting")

METHODS = ("ropelite", "uniform", "contribution", "exhaustive")


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce one pipeline run bit for bit."""

    seed: int
    cfg: ModelConfig
    method: str
    r: int
    mode: str = "jlrd"
    score_mode: str = "pre"
    d_ckv: int | None = None
    d_ck: int | None = None
    d_cv: int | None = None
    target_ratio: float | None = None
    calib_sequences: int = 4
    calib_length: int = 24
    decode_steps: int = 32
    paths: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "model": {
                "layers": self.cfg.n_layers,
                "heads": self.cfg.n_heads,
                "head_dim": self.cfg.head_dim,
                "embed_dim": self.cfg.embed_dim,
                "rope_base": self.cfg.rope_base,
            },
            "method": self.method,
            "r": self.r,
            "mode": self.mode,
            "score_mode": self.score_mode,
            "d_ckv": self.d_ckv,
            "d_ck": self.d_ck,
            "d_cv": self.d_cv,
            "target_ratio": self.target_ratio,
            "calib_sequences": self.calib_sequences,
            "calib_length": self.calib_length,
            "decode_steps": self.decode_steps,
            "paths": dict(self.paths),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RunManifest":
        try:
            m = doc["model"]
            cfg = ModelConfig(
                int(m["layers"]), int(m["heads"]), int(m["head_dim"]),
                int(m["embed_dim"]), float(m.get("rope_base", 10000.0)),
            )
            return cls(
                seed=int(doc["seed"]), cfg=cfg, method=str(doc["method"]),
                r=int(doc["r"]), mode=str(doc.get("mode", "jlrd")),
                score_mode=str(doc.get("score_mode", "pre")),
                d_ckv=None if doc.get("d_ckv") is None else int(doc["d_ckv"]),
                d_ck=None if doc.get("d_ck") is None else int(doc["d_ck"]),
                d_cv=None if doc.get("d_cv") is None else int(doc["d_cv"]),
                target_ratio=(None if doc.get("target_ratio") is None
                              else float(doc["target_ratio"])),
                calib_sequences=int(doc.get("calib_sequences", 4)),
                calib_length=int(doc.get("calib_length", 24)),
                decode_steps=int(doc.get("decode_steps", 32)),
                paths={str(k): str(v) for k, v in doc.get("paths", {}).items()},
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest ({exc})") from exc


def read_manifest(path) -> RunManifest:
    import json

    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return RunManifest.from_json(doc)


def write_manifest(path, manifest: RunManifest) -> None:
    import json

    Path(path).write_text(
        json.dumps(manifest.to_json(), separators=(",", ":")) + "\n", encoding="utf-8"
    )


def gen_model(path, cfg: ModelConfig, seed: int) -> None:
    """Write a seeded synthetic model file; same seed gives identical bytes."""
    formats.write_model(path, cfg, random_weights(cfg, seed))


def full_selection(cfg: ModelConfig) -> EliteSelection:
    """Degenerate selection rotating every chunk of every head."""
    cs = ChunkSet.full(cfg.head_dim)
    return EliteSelection(
        method="uniform", r=cfg.head_dim // 2,
        sets=tuple(tuple(cs for _ in range(cfg.n_heads)) for _ in range(cfg.n_layers)),
    )


def run_search(cfg: ModelConfig, weights: AttentionWeights, method: str, r: int,
               calib: CalibrationBatch | None, *, score_mode: str = "pre",
               threads: int = 1) -> EliteSelection:
    if method == "uniform":
        return uniform_select(cfg, r)
    if calib is None:
        raise ValidationError(f"method {method!r} needs calibration data")
    if method == "ropelite":
        return ropelite_search(cfg, weights, calib, r, score_mode=score_mode,
                               threads=threads)
    if method == "contribution":
        return contribution_select(cfg, weights, calib, r)
    if method == "exhaustive":
        return exhaustive_search(cfg, weights, calib, r, score_mode=score_mode,
                                 threads=threads)
    raise ValidationError(f"unknown method {method!r}")


def _derive_ranks(manifest: RunManifest, cfg: ModelConfig,
                  weights: AttentionWeights, elite: EliteSelection) -> dict:
    u = 2 * manifest.r * cfg.n_heads
    if manifest.mode == "jlrd":
        if manifest.d_ckv is not None:
            return {"d_ckv": manifest.d_ckv}
        if manifest.target_ratio is None:
            raise ValidationError("need d_ckv or target_ratio for jlrd")
        budget = int(round(manifest.target_ratio * cfg.full_cache_width))
        d_ckv = budget - u
        bound = min(cfg.embed_dim, cfg.full_cache_width - u)
        if not 1 <= d_ckv <= bound:
            raise ValidationError(
                f"target ratio {manifest.target_ratio} gives d_ckv {d_ckv} "
                f"outside [1, {bound}]"
            )
        return {"d_ckv": d_ckv}
    if manifest.mode == "slrd":
        if manifest.d_ck is not None and manifest.d_cv is not None:
            return {"d_ck": manifest.d_ck, "d_cv": manifest.d_cv}
        if manifest.target_ratio is None:
            raise ValidationError("need d_ck/d_cv or target_ratio for slrd")
        budget = int(round(manifest.target_ratio * cfg.full_cache_width))
        lw = weights.layers[0]
        _, wk_rest, _ = lowrank.split_key_projection(lw.wk, elite, 0)
        # The layer-0 spectra decide one global split for all layers.
        d_ck, d_cv = lowrank.allocate_slrd_split(wk_rest, lw.wv, budget, manifest.r, cfg)
        return {"d_ck": d_ck, "d_cv": d_cv}
    raise ValidationError(f"unknown mode {manifest.mode!r}")


@dataclass
class PipelineResult:
    manifest: RunManifest
    cost_rows: list[dict]
    equivalence_rows: list[dict]

    @property
    def passed(self) -> bool:
        return all(row.get("pass", True) for row in self.equivalence_rows)


def run_pipeline(manifest: RunManifest, threads: int = 1) -> PipelineResult:
    """select -> split -> decompose -> simulate-decode -> verify.

    Writes the elite file, factor file, cost report, and equivalence report
    named in the manifest paths. The model file must already exist.
    """
    paths = manifest.paths
    for key in ("model", "elite", "factors", "cost_report", "equivalence_report"):
        if key not in paths:
            raise ValidationError(f"manifest paths missing {key!r}")
    if not os.path.exists(paths["model"]):
        raise FileNotFoundError(f"model file {paths['model']} does not exist")
    cfg, weights = formats.read_model(paths["model"])
    if cfg != manifest.cfg:
        raise ValidationError("model file shape does not match manifest")

    if "calib" in paths:
        calib = formats.read_calibration(paths["calib"])
        calib.validate(cfg)
    else:
        calib = synthetic_calibration(
            cfg, manifest.seed + 1, manifest.calib_sequences, manifest.calib_length
        )
    elite = run_search(cfg, weights, manifest.method, manifest.r, calib,
                       score_mode=manifest.score_mode, threads=threads)
    formats.write_elite(paths["elite"], elite)

    ranks = _derive_ranks(manifest, cfg, weights, elite)
    cmodel = attention.compress_model(cfg, weights, elite, manifest.mode, **ranks)
    factors = tuple(layer.factors for layer in cmodel.layers)
    formats.write_factors(paths["factors"], cfg, factors)

    if manifest.mode == "jlrd":
        cost = lowrank.cost_jlrd(cfg, manifest.r, ranks["d_ckv"])
    else:
        cost = lowrank.cost_slrd(cfg, manifest.r, ranks["d_ck"], ranks["d_cv"])
    cost_row = {
        "stage": "cost",
        "mode": manifest.mode,
        "r": manifest.r,
        **{k: int(v) for k, v in ranks.items()},
        "params_original": cost.params_original,
        "params_after": cost.params_after,
        "cache_per_token_layer": cost.cache_per_token_layer,
        "cache_ratio": str(cost.cache_ratio),
        "cache_ratio_float": float(cost.cache_ratio),
    }
    formats.write_jsonl(paths["cost_report"], [cost_row])

    tokens = random_tokens(cfg, manifest.seed + 2, manifest.decode_steps)
    out_full = np.stack(
        [o.hidden for o in attention.forward_full(cfg, weights, tokens)]
    )
    out_rope = np.stack(
        [o.hidden for o in attention.forward_ropelite(cfg, weights, elite, tokens)]
    )
    out_comp = np.stack(
        [o.hidden for o in attention.forward_compressed(cfg, cmodel, tokens)]
    )
    eq_row = {
        "stage": "equivalence",
        "steps": int(manifest.decode_steps),
        "full_vs_ropelite": float(np.abs(out_full - out_rope).max()),
        "ropelite_vs_compressed": float(np.abs(out_rope - out_comp).max()),
        "full_vs_compressed": float(np.abs(out_full - out_comp).max()),
    }

    verify_rows = []

    def check(prop: str, residual: float, bound: float):
        verify_rows.append({
            "stage": "verify", "property": prop, "residual": float(residual),
            "bound": float(bound), "pass": bool(residual <= bound),
        })

    # Compressed decode must match the elite-rotated decode run with the
    # reassembled (approximated) weights, at any rank.
    approx_layers = []
    for li, lw in enumerate(weights.layers):
        layer = cmodel.layers[li]
        wk_hat, wv_hat = lowrank.reassemble(layer.factors, layer.split,
                                            layer.wk_elite, cfg)
        approx_layers.append(type(lw)(wq=lw.wq, wk=wk_hat, wv=wv_hat, wo=lw.wo))
    approx = AttentionWeights(layers=tuple(approx_layers))
    out_hat = np.stack(
        [o.hidden for o in attention.forward_ropelite(cfg, approx, elite, tokens)]
    )
    check("compressed_matches_reassembled_weights",
          float(np.abs(out_comp - out_hat).max()), 1e-9)

    out_rope_full = np.stack([
        o.hidden
        for o in attention.forward_ropelite(cfg, weights, full_selection(cfg), tokens)
    ])
    check("ropelite_full_set_matches_full",
          float(np.abs(out_full - out_rope_full).max()), 1e-10)

    actual_params = 2 * manifest.r * cfg.n_heads * cfg.embed_dim * cfg.n_layers
    for f in factors:
        if f.mode == "jlrd":
            actual_params += f.a_kv.size + f.b_joint.size
        else:
            actual_params += f.a_k.size + f.b_k_sep.size + f.a_v.size + f.b_v_sep.size
    check("stored_params_match_cost_formula",
          float(abs(actual_params - cost.params_after * cfg.n_layers)), 0.0)

    comp_cache = cmodel.new_cache()
    ratio = Fraction(comp_cache.width_per_token_layer(), cfg.full_cache_width)
    check("cache_width_matches_cost_formula",
          float(abs(ratio - cost.cache_ratio)), 0.0)

    formats.write_jsonl(paths["equivalence_report"], [eq_row] + verify_rows)
    return PipelineResult(
        manifest=manifest, cost_rows=[cost_row],
        equivalence_rows=[eq_row] + verify_rows,
    )


@dataclass
class VerifyReport:
    rows: list[dict]

    @property
    def passed(self) -> bool:
        return all(row["pass"] for row in self.rows)


def _suite_rope_identity(cfg, weights, seed, rows):
    rng = np.random.default_rng(seed)
    params = cfg.rope
    n_chunks = cfg.head_dim // 2
    worst = 0.0
    for _ in range(2000):
        q = rng.standard_normal(cfg.head_dim)
        k = rng.standard_normal(cfg.head_dim)
        m = int(rng.integers(0, 4096))
        n = int(rng.integers(0, 4096))
        mask = rng.random(n_chunks) < 0.5
        chunks = ChunkSet.of(np.flatnonzero(mask))
        absolute = float(rotate(q, m, chunks, params) @ rotate(k, n, chunks, params))
        rel = relative_score(q, k, m, n, chunks, params)
        denom = float(np.linalg.norm(q) * np.linalg.norm(k)) or 1.0
        worst = max(worst, abs(absolute - rel) / denom)
    rows.append(_row("rope-identity", "absolute_equals_relative", worst, 1e-9))


def _suite_eckart_young(cfg, weights, seed, rows):
    rng = np.random.default_rng(seed)
    lw = weights.layers[0]
    mat = np.concatenate([lw.wk, lw.wv], axis=1)
    res = linalg.svd(mat)
    fnorm = linalg.frobenius(mat)
    max_rank = min(mat.shape)
    worst_tail = 0.0
    worst_opt = 0.0
    for r in sorted({1, max_rank // 2 or 1, max_rank}):
        a, b = linalg.truncated_factors(mat, r)
        err = linalg.frobenius(mat - a @ b)
        tail = float(np.sqrt((res.sigma[r:] ** 2).sum()))
        worst_tail = max(worst_tail, abs(err - tail) / fnorm)
        for _ in range(50):
            q = (rng.standard_normal((mat.shape[0], r))
                 @ rng.standard_normal((r, mat.shape[1])))
            q *= fnorm / (linalg.frobenius(q) or 1.0)
            worst_opt = max(worst_opt, err - linalg.frobenius(mat - q))
    rows.append(_row("eckart-young", "error_equals_sigma_tail", worst_tail, 1e-8))
    rows.append(_row("eckart-young", "beats_random_competitors",
                     max(0.0, worst_opt), 1e-9))


def _suite_greedy_oracle(cfg, weights, seed, rows):
    calib = synthetic_calibration(cfg, seed + 1, 2, 12)
    greedy1 = ropelite_search(cfg, weights, calib, 1)
    exact1 = exhaustive_search(cfg, weights, calib, 1)
    same = greedy1.sets == exact1.sets
    rows.append(_row("greedy-oracle", "r1_matches_exhaustive",
                     0.0 if same else 1.0, 0.0))
    n_chunks = cfg.head_dim // 2
    if n_chunks >= 2 and math.comb(n_chunks, 2) <= 4096:
        greedy2 = ropelite_search(cfg, weights, calib, 2)
        exact2 = exhaustive_search(cfg, weights, calib, 2)
        gd = greedy2.final_distances()
        ed = exact2.final_distances()
        gap = float((ed - gd).max())  # positive would mean greedy beat the oracle
        rows.append(_row("greedy-oracle", "r2_oracle_not_beaten",
                         max(0.0, gap), 1e-9))


def _suite_decode_equivalence(cfg, weights, seed, rows, elite=None, factors=None):
    tokens = random_tokens(cfg, seed + 2, 12)
    inc = np.stack([o.hidden for o in attention.forward_full(cfg, weights, tokens)])
    worst = 0.0
    for t in (tokens.shape[0] // 2, tokens.shape[0] - 1):
        fresh = attention.forward_full(cfg, weights, tokens[: t + 1])
        worst = max(worst, float(np.abs(fresh[-1].hidden - inc[t]).max()))
    rows.append(_row("decode-equivalence", "incremental_matches_recompute",
                     worst, 1e-9))
    rope_full = np.stack([
        o.hidden
        for o in attention.forward_ropelite(cfg, weights, full_selection(cfg), tokens)
    ])
    rows.append(_row("decode-equivalence", "full_chunk_set_degenerate",
                     float(np.abs(rope_full - inc).max()), 1e-10))
    if elite is not None and factors is not None:
        cmodel = attention.assemble_compressed(cfg, weights, elite, factors)
        comp = np.stack(
            [o.hidden for o in attention.forward_compressed(cfg, cmodel, tokens)]
        )
        approx_layers = []
        for li, lw in enumerate(weights.layers):
            layer = cmodel.layers[li]
            wk_hat, wv_hat = lowrank.reassemble(layer.factors, layer.split,
                                                layer.wk_elite, cfg)
            approx_layers.append(type(lw)(wq=lw.wq, wk=wk_hat, wv=wv_hat, wo=lw.wo))
        hat = np.stack([
            o.hidden
            for o in attention.forward_ropelite(
                cfg, AttentionWeights(tuple(approx_layers)), elite, tokens)
        ])
        rows.append(_row("decode-equivalence", "compressed_matches_reassembled",
                         float(np.abs(comp - hat).max()), 1e-9))


def _suite_accounting(cfg, weights, seed, rows, elite=None, factors=None):
    rng = np.random.default_rng(seed)
    d, dh, nh = cfg.embed_dim, cfg.head_dim, cfg.n_heads
    h = dh * nh
    worst = 0
    for _ in range(20):
        r = int(rng.integers(0, dh // 2 + 1))
        u = 2 * r * nh
        d_ckv = int(rng.integers(0, 2 * h - u + 1))
        simplified = lowrank.cost_jlrd(cfg, r, d_ckv).params_after
        unsimplified = u * d + d_ckv * (d + 2 * h - u)
        worst = max(worst, abs(simplified - unsimplified))
        d_ck = int(rng.integers(0, h - u + 1))
        d_cv = int(rng.integers(0, h + 1))
        s_simpl = lowrank.cost_slrd(cfg, r, d_ck, d_cv).params_after
        s_plain = u * d + d_ck * (d + h - u) + d_cv * (d + h)
        worst = max(worst, abs(s_simpl - s_plain))
    rows.append(_row("accounting", "simplified_matches_unsimplified", float(worst), 0.0))
    if factors is not None:
        f0 = factors[0]
        if f0.mode == "jlrd":
            cost = lowrank.cost_jlrd(cfg, f0.elite_r, f0.d_ckv)
        else:
            cost = lowrank.cost_slrd(cfg, f0.elite_r, f0.d_ck, f0.d_cv)
        actual = 2 * f0.elite_r * nh * d * cfg.n_layers
        for f in factors:
            if f.mode == "jlrd":
                actual += f.a_kv.size + f.b_joint.size
            else:
                actual += f.a_k.size + f.b_k_sep.size + f.a_v.size + f.b_v_sep.size
        rows.append(_row("accounting", "stored_params_match_formula",
                         float(abs(actual - cost.params_after * cfg.n_layers)), 0.0))
        if elite is not None:
            worst_tail = 0.0
            for li, lw in enumerate(weights.layers):
                _, wk_rest, _ = lowrank.split_key_projection(lw.wk, elite, li)
                concat = np.concatenate([wk_rest, lw.wv], axis=1)
                f = factors[li]
                if f.mode == "jlrd":
                    approx = f.a_kv @ f.b_joint
                else:
                    approx = np.concatenate(
                        [f.a_k @ f.b_k_sep, f.a_v @ f.b_v_sep], axis=1
                    )
                err = linalg.frobenius(concat - approx)
                tail = float(np.sqrt(
                    (linalg.svd(concat).sigma[f.latent_width:] ** 2).sum()
                ))
                worst_tail = max(
                    worst_tail, abs(err - tail) / (linalg.frobenius(concat) or 1.0)
                )
            rows.append(_row("accounting", "factor_error_equals_sigma_tail",
                             worst_tail, 1e-8))


def _row(suite: str, prop: str, residual: float, bound: float) -> dict:
    return {
        "stage": "verify", "suite": suite, "property": prop,
        "residual": float(residual), "bound": float(bound),
        "pass": bool(residual <= bound),
    }


def verify(model_path, suite: str = "all", *, elite_path=None, factors_path=None,
           seed: int = 0) -> VerifyReport:
    """Run one named invariant suite (or all) against a model file.

    Unreadable or inconsistent elite/factor files are reported as failed
    properties rather than raised, so corruption shows up in the report.
    """
    if suite != "all" and suite not in SUITES:
        raise ValidationError(f"unknown suite {suite!r}; choose from {SUITES + ('all',)}")
    if not os.path.exists(model_path):
        raise FileNotFoundError(f"model file {model_path} does not exist")
    cfg, weights = formats.read_model(model_path)
    rows: list[dict] = []

    elite = factors = None
    load_error = None
    try:
        if elite_path is not None:
            if not os.path.exists(elite_path):
                raise FileNotFoundError(f"elite file {elite_path} does not exist")
            elite = formats.read_elite(elite_path)
            elite.validate(cfg)
        if factors_path is not None:
            if not os.path.exists(factors_path):
                raise FileNotFoundError(f"factor file {factors_path} does not exist")
            fcfg, factors = formats.read_factors(factors_path)
            if fcfg != cfg:
                raise FormatError("factor file shape does not match model")
    except FileNotFoundError:
        raise
    except (ToolError, ValueError) as exc:
        load_error = str(exc)
        factors = None

    wanted = SUITES if suite == "all" else (suite,)
    for name in wanted:
        try:
            if name == "rope-identity":
                _suite_rope_identity(cfg, weights, seed, rows)
            elif name == "eckart-young":
                _suite_eckart_young(cfg, weights, seed, rows)
            elif name == "greedy-oracle":
                _suite_greedy_oracle(cfg, weights, seed, rows)
            elif name == "decode-equivalence":
                _suite_decode_equivalence(cfg, weights, seed, rows,
                                          elite=elite, factors=factors)
            elif name == "accounting":
                if load_error is not None:
                    rows.append({
                        "stage": "verify", "suite": "accounting",
                        "property": "artifacts_readable", "residual": 1.0,
                        "bound": 0.0, "pass": False, "error": load_error,
                    })
                _suite_accounting(cfg, weights, seed, rows,
                                  elite=elite, factors=factors)
        except (ToolError, ValueError) as exc:
            rows.append({
                "stage": "verify", "suite": name, "property": "suite_completed",
                "residual": 1.0, "bound": 0.0, "pass": False, "error": str(exc),
            })
    return VerifyReport(rows=rows)
