from fractions import Fraction

import numpy as np
import pytest

import oracles
from rotkv.attention import (
    KVCacheStore,
    cache_bytes,
    compress_model,
    decode_step_compressed,
    forward_compressed,
    forward_full,
    forward_ropelite,
)
from rotkv.chunk_select import EliteSelection, uniform_select
from rotkv.errors import CacheLayoutError, ShapeError
from rotkv.lowrank import reassemble
from rotkv.model import AttentionWeights, LayerWeights, ModelConfig, random_weights
from rotkv.pipeline import full_selection
from rotkv.rope import ChunkSet


def hiddens(outs):
    return np.stack([o.hidden for o in outs])


def full_rank_latent(cfg, r):
    return min(cfg.embed_dim, cfg.full_cache_width - 2 * r * cfg.n_heads)


class TestForwardFull:
    def test_single_token_is_value_through_output(self):
        cfg = ModelConfig.create(1, 2, 4)
        w = random_weights(cfg, 3)
        x = np.random.default_rng(5).standard_normal((1, cfg.embed_dim))
        out = forward_full(cfg, w, x)[0].hidden
        expect = (x[0] @ w.layers[0].wv) @ w.layers[0].wo
        assert np.abs(out - expect).max() <= 1e-12

    def test_zero_weights_zero_output(self, toy_cfg):
        z = np.zeros((toy_cfg.embed_dim, toy_cfg.kv_width))
        zo = np.zeros((toy_cfg.kv_width, toy_cfg.embed_dim))
        w = AttentionWeights(tuple(
            LayerWeights(z, z, z, zo) for _ in range(toy_cfg.n_layers)
        ))
        x = np.random.default_rng(0).standard_normal((4, toy_cfg.embed_dim))
        assert np.abs(hiddens(forward_full(toy_cfg, w, x))).max() == 0.0

    def test_matches_no_cache_recompute_oracle(self, tiny_cfg, tiny_weights):
        x = np.random.default_rng(9).standard_normal((5, tiny_cfg.embed_dim)) * 0.3
        got = hiddens(forward_full(tiny_cfg, tiny_weights, x))
        want = oracles.naive_full_forward(tiny_cfg, tiny_weights, x)
        assert np.abs(got - want).max() <= 1e-9

    def test_softmax_rows_sum_to_one(self, toy_cfg, toy_weights):
        x = np.random.default_rng(2).standard_normal((6, toy_cfg.embed_dim))
        outs = forward_full(toy_cfg, toy_weights, x, want_scores=True)
        for t, o in enumerate(outs):
            assert o.scores.shape == (toy_cfg.n_layers, toy_cfg.n_heads, t + 1)
            assert np.abs(o.scores.sum(axis=2) - 1.0).max() <= 1e-9

    def test_token_shape_rejected(self, toy_cfg, toy_weights):
        with pytest.raises(ShapeError):
            forward_full(toy_cfg, toy_weights, np.zeros((3, 5)))


class TestForwardRopelite:
    def test_full_elite_set_matches_full(self, toy_cfg, toy_weights):
        x = np.random.default_rng(4).standard_normal((8, toy_cfg.embed_dim))
        full = hiddens(forward_full(toy_cfg, toy_weights, x))
        rope = hiddens(
            forward_ropelite(toy_cfg, toy_weights, full_selection(toy_cfg), x)
        )
        assert np.abs(full - rope).max() <= 1e-10

    def test_empty_elite_is_position_free(self, toy_cfg, toy_weights):
        empty = ChunkSet.empty()
        sel = EliteSelection(
            method="uniform", r=0,
            sets=tuple(
                tuple(empty for _ in range(toy_cfg.n_heads))
                for _ in range(toy_cfg.n_layers)
            ),
        )
        x = np.random.default_rng(6).standard_normal((5, toy_cfg.embed_dim)) * 0.3
        got = hiddens(forward_ropelite(toy_cfg, toy_weights, sel, x))
        want = oracles.relative_mixed_forward(toy_cfg, toy_weights, sel.sets, x)
        assert np.abs(got - want).max() <= 1e-9

    def test_partial_elite_matches_relative_oracle(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 2)
        x = np.random.default_rng(8).standard_normal((6, toy_cfg.embed_dim)) * 0.3
        got = hiddens(forward_ropelite(toy_cfg, toy_weights, sel, x))
        want = oracles.relative_mixed_forward(toy_cfg, toy_weights, sel.sets, x)
        assert np.abs(got - want).max() <= 1e-9

    def test_per_head_sets_differ(self, toy_cfg, toy_weights):
        sets = tuple(
            tuple(ChunkSet.of([h, 3 - h]) for h in range(toy_cfg.n_heads))
            for _ in range(toy_cfg.n_layers)
        )
        sel = EliteSelection(method="uniform", r=2, sets=sets)
        x = np.random.default_rng(10).standard_normal((5, toy_cfg.embed_dim)) * 0.3
        got = hiddens(forward_ropelite(toy_cfg, toy_weights, sel, x))
        want = oracles.relative_mixed_forward(toy_cfg, toy_weights, sets, x)
        assert np.abs(got - want).max() <= 1e-9


class TestCompressedDecode:
    def test_full_rank_matches_ropelite(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 2)
        cm = compress_model(
            toy_cfg, toy_weights, sel, "jlrd",
            d_ckv=full_rank_latent(toy_cfg, sel.r),
        )
        x = np.random.default_rng(12).standard_normal((10, toy_cfg.embed_dim))
        rope = hiddens(forward_ropelite(toy_cfg, toy_weights, sel, x))
        comp = hiddens(forward_compressed(toy_cfg, cm, x))
        assert np.abs(rope - comp).max() <= 1e-8

    @pytest.mark.parametrize("mode,ranks", [
        ("jlrd", {"d_ckv": 5}),
        ("slrd", {"d_ck": 3, "d_cv": 4}),
    ])
    def test_lossy_matches_reassembled_weights(self, toy_cfg, toy_weights, mode, ranks):
        sel = uniform_select(toy_cfg, 1)
        cm = compress_model(toy_cfg, toy_weights, sel, mode, **ranks)
        layers = []
        for li, lw in enumerate(toy_weights.layers):
            lay = cm.layers[li]
            wk_hat, wv_hat = reassemble(lay.factors, lay.split, lay.wk_elite, toy_cfg)
            layers.append(LayerWeights(wq=lw.wq, wk=wk_hat, wv=wv_hat, wo=lw.wo))
        approx = AttentionWeights(tuple(layers))
        x = np.random.default_rng(13).standard_normal((7, toy_cfg.embed_dim))
        want = hiddens(forward_ropelite(toy_cfg, approx, sel, x))
        got = hiddens(forward_compressed(toy_cfg, cm, x))
        assert np.abs(want - got).max() <= 1e-9

    def test_one_step_after_empty_cache(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        cm = compress_model(toy_cfg, toy_weights, sel, "jlrd", d_ckv=4)
        layers = []
        for li, lw in enumerate(toy_weights.layers):
            lay = cm.layers[li]
            wk_hat, wv_hat = reassemble(lay.factors, lay.split, lay.wk_elite, toy_cfg)
            layers.append(LayerWeights(wq=lw.wq, wk=wk_hat, wv=wv_hat, wo=lw.wo))
        approx = AttentionWeights(tuple(layers))
        x = np.random.default_rng(14).standard_normal(toy_cfg.embed_dim)
        cache = cm.new_cache()
        got = decode_step_compressed(toy_cfg, cm, cache, x).hidden
        want = forward_ropelite(toy_cfg, approx, sel, x[None, :])[0].hidden
        assert np.abs(got - want).max() <= 1e-9

    def test_cache_width_formula(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        cm = compress_model(toy_cfg, toy_weights, sel, "jlrd", d_ckv=4)
        cache = cm.new_cache()
        forward_compressed(toy_cfg, cm, np.zeros((5, toy_cfg.embed_dim)), cache=cache)
        assert cache.tokens == 5
        want_width = 2 * sel.r * toy_cfg.n_heads + 4
        assert cache.width_per_token_layer() == want_width
        assert cache_bytes(cache) == toy_cfg.n_layers * 5 * want_width * 8

    def test_softmax_rows_sum_to_one(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 2)
        cm = compress_model(toy_cfg, toy_weights, sel, "jlrd", d_ckv=6)
        x = np.random.default_rng(15).standard_normal((5, toy_cfg.embed_dim))
        outs = forward_compressed(toy_cfg, cm, x, want_scores=True)
        for t, o in enumerate(outs):
            assert np.abs(o.scores.sum(axis=2) - 1.0).max() <= 1e-9

    def test_layout_mismatch_rejected(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        cm = compress_model(toy_cfg, toy_weights, sel, "jlrd", d_ckv=4)
        with pytest.raises(CacheLayoutError):
            decode_step_compressed(
                toy_cfg, cm, KVCacheStore.full(toy_cfg),
                np.zeros(toy_cfg.embed_dim),
            )


class TestIncrementalEqualsRecompute:
    def test_all_layouts(self, toy_cfg, toy_weights):
        x = np.random.default_rng(16).standard_normal((9, toy_cfg.embed_dim))
        sel = uniform_select(toy_cfg, 2)
        cm = compress_model(toy_cfg, toy_weights, sel, "jlrd", d_ckv=6)
        runs = {
            "full": lambda toks: hiddens(forward_full(toy_cfg, toy_weights, toks)),
            "ropelite": lambda toks: hiddens(
                forward_ropelite(toy_cfg, toy_weights, sel, toks)
            ),
            "compressed": lambda toks: hiddens(forward_compressed(toy_cfg, cm, toks)),
        }
        for name, run in runs.items():
            inc = run(x)
            for t in range(x.shape[0]):
                fresh = run(x[: t + 1])
                assert np.abs(fresh[-1] - inc[t]).max() <= 1e-9, name

    def test_residual_mode(self, toy_cfg, toy_weights):
        x = np.random.default_rng(17).standard_normal((6, toy_cfg.embed_dim))
        inc = hiddens(forward_full(toy_cfg, toy_weights, x, residual=True))
        assert np.isfinite(inc).all()
        fresh = forward_full(toy_cfg, toy_weights, x[:4], residual=True)
        assert np.abs(fresh[-1].hidden - inc[3]).max() <= 1e-9


class TestCacheBytes:
    def test_full_layout_reference_shape(self):
        # l=32, n_h=32, d_h=128: 2 * 128 * 32 = 8192 floats per token per layer.
        cfg = ModelConfig.create(32, 32, 128)
        cache = KVCacheStore.full(cfg)
        assert cache.width_per_token_layer() == 8192
        assert cache_bytes(cache, 1) == 32 * 1 * 8192 * 8

    def test_quarter_ratio_width(self):
        cfg = ModelConfig.create(32, 32, 128)
        comp = KVCacheStore("compressed", cfg.n_layers, 2 * 8 * 32, 0, 1536)
        full = KVCacheStore.full(cfg)
        assert comp.width_per_token_layer() == 2048
        ratio = Fraction(cache_bytes(comp, 7), cache_bytes(full, 7))
        assert ratio == Fraction(1, 4)

    def test_zero_width(self):
        comp = KVCacheStore("compressed", 4, 0, 0, 0)
        assert cache_bytes(comp, 10) == 0

    def test_ratio_is_exact_rational(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        cm = compress_model(toy_cfg, toy_weights, sel, "jlrd", d_ckv=4)
        comp = cm.new_cache()
        full = KVCacheStore.full(toy_cfg)
        got = Fraction(cache_bytes(comp, 3), cache_bytes(full, 3))
        want = Fraction(
            2 * sel.r * toy_cfg.n_heads + 4, toy_cfg.full_cache_width
        )
        assert got == want

    def test_ropelite_width_equals_full(self, toy_cfg):
        rope = KVCacheStore.ropelite(toy_cfg, uniform_select(toy_cfg, 2))
        full = KVCacheStore.full(toy_cfg)
        assert rope.width_per_token_layer() == full.width_per_token_layer()
