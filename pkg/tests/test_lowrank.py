from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from rotkv.chunk_select import EliteSelection, uniform_select
from rotkv.errors import BudgetError, RankError, SelectionError, ValidationError
from rotkv.linalg import frobenius, svd
from rotkv.lowrank import (
    allocate_configs,
    allocate_slrd_split,
    cost_jlrd,
    cost_slrd,
    decompose_jlrd,
    decompose_slrd,
    reassemble,
    split_key_projection,
)
from rotkv.model import ModelConfig, random_weights
from rotkv.rope import ChunkSet


def selection_from_sets(cfg, per_head_sets, r):
    return EliteSelection(
        method="uniform", r=r,
        sets=tuple(tuple(per_head_sets) for _ in range(cfg.n_layers)),
    )


class TestSplitKeyProjection:
    def test_hand_traced_column_mapping(self):
        # d_h=4, n_h=2; head0 elite {1} -> columns 2,3; head1 elite {0} -> 4,5.
        cfg = ModelConfig.create(1, 2, 4)
        wk = np.arange(8.0 * 8).reshape(8, 8)
        sel = selection_from_sets(cfg, [ChunkSet.of([1]), ChunkSet.of([0])], 1)
        wk_elite, wk_rest, split = split_key_projection(wk, sel, 0)
        assert split.elite_cols == (2, 3, 4, 5)
        assert split.rest_cols == (0, 1, 6, 7)
        assert np.array_equal(wk_elite, wk[:, [2, 3, 4, 5]])
        assert np.array_equal(wk_rest, wk[:, [0, 1, 6, 7]])

    def test_full_elite_leaves_no_rest(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 4)
        wk_elite, wk_rest, _ = split_key_projection(toy_weights.layers[0].wk, sel, 0)
        assert wk_rest.shape == (toy_cfg.embed_dim, 0)
        assert np.array_equal(wk_elite, toy_weights.layers[0].wk)

    def test_empty_elite_keeps_everything(self, toy_cfg, toy_weights):
        empty = ChunkSet.empty()
        sel = selection_from_sets(toy_cfg, [empty] * toy_cfg.n_heads, 0)
        wk_elite, wk_rest, _ = split_key_projection(toy_weights.layers[0].wk, sel, 0)
        assert wk_elite.shape == (toy_cfg.embed_dim, 0)
        assert np.array_equal(wk_rest, toy_weights.layers[0].wk)

    def test_inconsistent_sizes_rejected(self, toy_cfg):
        with pytest.raises(SelectionError):
            EliteSelection(
                method="uniform", r=1,
                sets=(
                    (ChunkSet.of([0]), ChunkSet.of([0, 1])),
                    (ChunkSet.of([0]), ChunkSet.of([0])),
                ),
            )


class TestDecompose:
    def test_jlrd_full_rank_exact(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        lw = toy_weights.layers[0]
        _, wk_rest, split = split_key_projection(lw.wk, sel, 0)
        concat = np.concatenate([wk_rest, lw.wv], axis=1)
        f = decompose_jlrd(wk_rest, lw.wv, min(concat.shape), cfg=toy_cfg, elite_r=1)
        assert frobenius(wk_rest - f.a_kv @ f.b_k) <= 1e-8 * frobenius(wk_rest)
        assert frobenius(lw.wv - f.a_kv @ f.b_v) <= 1e-8 * frobenius(lw.wv)

    def test_jlrd_duplicated_value_matrix(self, toy_cfg):
        # wv duplicating wk_rest: the concat rank equals rank(wk_rest), so a
        # half-width factorization is exact.
        rng = np.random.default_rng(5)
        sel = uniform_select(toy_cfg, 2)
        rest_width = (toy_cfg.head_dim - 2 * sel.r) * toy_cfg.n_heads
        assert rest_width == toy_cfg.kv_width // 2
        wk_rest = rng.standard_normal((toy_cfg.embed_dim, rest_width))
        wv = np.concatenate([wk_rest, wk_rest], axis=1)
        rank = min(toy_cfg.embed_dim, rest_width)
        f = decompose_jlrd(wk_rest, wv, rank, cfg=toy_cfg, elite_r=sel.r)
        concat = np.concatenate([wk_rest, wv], axis=1)
        assert frobenius(concat - f.a_kv @ f.b_joint) <= 1e-8 * frobenius(concat)

    def test_jlrd_tail_matches_oracle(self):
        cfg = ModelConfig.create(1, 2, 8)
        w = random_weights(cfg, 77)
        sel = uniform_select(cfg, 2)
        lw = w.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        f = decompose_jlrd(wk_rest, lw.wv, 4, cfg=cfg, elite_r=2)
        concat = np.concatenate([wk_rest, lw.wv], axis=1)
        err = frobenius(concat - f.a_kv @ f.b_joint)
        assert abs(err - oracles.sigma_tail(concat, 4)) <= 1e-8

    def test_jlrd_b_blocks_are_contiguous(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 2)
        lw = toy_weights.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        f = decompose_jlrd(wk_rest, lw.wv, 3, cfg=toy_cfg, elite_r=2)
        assert np.shares_memory(f.b_k, f.b_joint)
        assert np.shares_memory(f.b_v, f.b_joint)
        assert f.b_k.shape[1] + f.b_v.shape[1] == f.b_joint.shape[1]

    def test_slrd_full_rank_exact(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        lw = toy_weights.layers[1]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 1)
        f = decompose_slrd(
            wk_rest, lw.wv, min(wk_rest.shape), min(lw.wv.shape),
            cfg=toy_cfg, elite_r=1,
        )
        assert frobenius(wk_rest - f.a_k @ f.b_k) <= 1e-8 * frobenius(wk_rest)
        assert frobenius(lw.wv - f.a_v @ f.b_v) <= 1e-8 * frobenius(lw.wv)

    def test_slrd_zero_value_matrix(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        lw = toy_weights.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        f = decompose_slrd(
            wk_rest, np.zeros_like(lw.wv), 2, 3, cfg=toy_cfg, elite_r=1
        )
        assert frobenius(f.a_v @ f.b_v) == 0.0

    def test_slrd_tail_matches_oracle(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 2)
        lw = toy_weights.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        f = decompose_slrd(wk_rest, lw.wv, 3, 5, cfg=toy_cfg, elite_r=2)
        assert abs(
            frobenius(wk_rest - f.a_k @ f.b_k) - oracles.sigma_tail(wk_rest, 3)
        ) <= 1e-8
        assert abs(
            frobenius(lw.wv - f.a_v @ f.b_v) - oracles.sigma_tail(lw.wv, 5)
        ) <= 1e-8

    def test_rank_bounds(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        lw = toy_weights.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        with pytest.raises(RankError):
            decompose_jlrd(wk_rest, lw.wv, 0, cfg=toy_cfg, elite_r=1)
        with pytest.raises(RankError):
            decompose_jlrd(wk_rest, lw.wv, 99, cfg=toy_cfg, elite_r=1)
        with pytest.raises(RankError):
            decompose_slrd(wk_rest, lw.wv, 0, 2, cfg=toy_cfg, elite_r=1)

    def test_error_monotone_in_rank(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        lw = toy_weights.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        concat = np.concatenate([wk_rest, lw.wv], axis=1)
        errs = []
        for rank in (1, 3, 6, 9):
            f = decompose_jlrd(wk_rest, lw.wv, rank, cfg=toy_cfg, elite_r=1)
            errs.append(frobenius(concat - f.a_kv @ f.b_joint))
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


class TestReassemble:
    @pytest.mark.parametrize("mode", ["jlrd", "slrd"])
    def test_full_rank_round_trip(self, toy_cfg, toy_weights, mode):
        sel = selection_from_sets(
            toy_cfg, [ChunkSet.of([1, 3]), ChunkSet.of([0, 2])], 2
        )
        lw = toy_weights.layers[0]
        wk_elite, wk_rest, split = split_key_projection(lw.wk, sel, 0)
        if mode == "jlrd":
            rank = min(toy_cfg.embed_dim, wk_rest.shape[1] + toy_cfg.kv_width)
            f = decompose_jlrd(wk_rest, lw.wv, rank, cfg=toy_cfg, elite_r=2)
        else:
            f = decompose_slrd(
                wk_rest, lw.wv, min(wk_rest.shape), min(lw.wv.shape),
                cfg=toy_cfg, elite_r=2,
            )
        wk_hat, wv_hat = reassemble(f, split, wk_elite, toy_cfg)
        assert frobenius(wk_hat - lw.wk) <= 1e-8 * frobenius(lw.wk)
        assert frobenius(wv_hat - lw.wv) <= 1e-8 * frobenius(lw.wv)


class TestCostFormulas:
    def test_slrd_degenerate_identity_point(self):
        cfg = ModelConfig.create(1, 4, 16)
        rep = cost_slrd(cfg, 0, cfg.kv_width, cfg.kv_width)
        assert rep.params_original == 2 * cfg.embed_dim * cfg.kv_width
        assert rep.cache_per_token_layer == cfg.full_cache_width
        assert rep.cache_ratio == 1

    def test_slrd_reference_shape_quarter(self):
        cfg = ModelConfig.create(32, 32, 128)
        rep = cost_slrd(cfg, 8, 768, 768)
        assert rep.cache_per_token_layer == 512 + 768 + 768 == 2048
        assert rep.cache_ratio == Fraction(1, 4)

    def test_jlrd_reference_shape_quarter(self):
        cfg = ModelConfig.create(32, 32, 128)
        rep = cost_jlrd(cfg, 8, 1536)
        assert rep.cache_per_token_layer == 2048
        assert rep.cache_ratio == Fraction(1, 4)
        assert rep.params_after <= rep.params_original

    def test_jlrd_boundary_all_chunks_no_latent(self):
        cfg = ModelConfig.create(1, 4, 16)
        rep = cost_jlrd(cfg, cfg.head_dim // 2, 0)
        assert rep.params_after == cfg.head_dim * cfg.n_heads * cfg.embed_dim
        assert rep.cache_per_token_layer == cfg.head_dim * cfg.n_heads

    @settings(max_examples=100, deadline=None)
    @given(
        nh=st.integers(1, 16),
        half=st.integers(1, 32),
        r=st.integers(0, 32),
        ck=st.integers(0, 64),
        cv=st.integers(0, 64),
    )
    def test_simplified_equals_unsimplified(self, nh, half, r, ck, cv):
        head_dim = 2 * half
        r = min(r, half)
        cfg = ModelConfig.create(1, nh, head_dim)
        d = cfg.embed_dim
        srep = cost_slrd(cfg, r, ck, cv)
        assert srep.params_after == oracles.slrd_params_unsimplified(
            d, head_dim, nh, r, ck, cv
        )
        jrep = cost_jlrd(cfg, r, ck + cv)
        assert jrep.params_after == oracles.jlrd_params_unsimplified(
            d, head_dim, nh, r, ck + cv
        )

    @settings(max_examples=100, deadline=None)
    @given(
        nh=st.integers(1, 16),
        half=st.integers(1, 32),
        r=st.integers(0, 32),
        ck=st.integers(1, 64),
        cv=st.integers(1, 64),
    )
    def test_equal_cache_parameter_gap_identity(self, nh, half, r, ck, cv):
        # At matched cache width (d_ckv = d_ck + d_cv) the joint form costs
        # exactly d*d_ck + (d - 2*r*n_h)*d_cv more parameters than the
        # separated form; the joint up-projection spans every output column
        # per rank. Equal-parameter budgets therefore buy the joint form a
        # smaller cache, never a cheaper equal-cache one.
        head_dim = 2 * half
        r = min(r, half)
        cfg = ModelConfig.create(1, nh, head_dim)
        d = cfg.embed_dim
        u = 2 * r * nh
        srep = cost_slrd(cfg, r, ck, cv)
        jrep = cost_jlrd(cfg, r, ck + cv)
        assert jrep.cache_per_token_layer == srep.cache_per_token_layer
        assert jrep.params_after - srep.params_after == d * ck + (d - u) * cv

    @settings(max_examples=100, deadline=None)
    @given(
        nh=st.integers(1, 16),
        half=st.integers(1, 32),
        r=st.integers(0, 32),
        ck=st.integers(1, 64),
        cv=st.integers(1, 64),
    )
    def test_equal_parameter_budget_buys_smaller_joint_cache(self, nh, half, r, ck, cv):
        # The joint rank affordable under the separated parameter budget
        # never exceeds d_ck + d_cv, so its cache is no larger.
        head_dim = 2 * half
        r = min(r, half)
        cfg = ModelConfig.create(1, nh, head_dim)
        srep = cost_slrd(cfg, r, ck, cv)
        d_ckv = 0
        while cost_jlrd(cfg, r, d_ckv + 1).params_after <= srep.params_after:
            d_ckv += 1
        jrep = cost_jlrd(cfg, r, d_ckv)
        assert jrep.params_after <= srep.params_after
        assert jrep.cache_per_token_layer <= srep.cache_per_token_layer


class TestAllocateSplit:
    def test_zero_value_side_feeds_key_first(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        lw = toy_weights.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        wv = np.zeros((toy_cfg.embed_dim, toy_cfg.kv_width))
        base = 2 * sel.r * toy_cfg.n_heads
        max_k = min(wk_rest.shape)
        budget = base + max_k + 3
        d_ck, d_cv = allocate_slrd_split(wk_rest, wv, budget, sel.r, toy_cfg)
        assert d_ck == max_k
        assert d_cv == 3

    def test_symmetric_spectra_balance(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        lw = toy_weights.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        wv = np.concatenate([wk_rest, np.zeros((toy_cfg.embed_dim,
                                                toy_cfg.kv_width - wk_rest.shape[1]))],
                            axis=1)
        base = 2 * sel.r * toy_cfg.n_heads
        for budget in (base + 5, base + 8, base + 11):
            d_ck, d_cv = allocate_slrd_split(wk_rest, wv, budget, sel.r, toy_cfg)
            assert abs(d_ck - d_cv) <= 1

    def test_matches_enumeration_optimum(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        lw = toy_weights.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        sig_k = svd(wk_rest).sigma
        sig_v = svd(lw.wv).sigma
        base = 2 * sel.r * toy_cfg.n_heads
        for budget in range(base + 2, base + 20):
            d_ck, d_cv = allocate_slrd_split(wk_rest, lw.wv, budget, sel.r, toy_cfg)
            got = float((sig_k[d_ck:] ** 2).sum() + (sig_v[d_cv:] ** 2).sum())
            _, best = oracles.best_split_by_enumeration(
                sig_k, sig_v, budget - base, min(wk_rest.shape), min(lw.wv.shape)
            )
            assert got <= best + 1e-9 * max(best, 1.0)

    def test_budget_errors(self, toy_cfg, toy_weights):
        sel = uniform_select(toy_cfg, 1)
        lw = toy_weights.layers[0]
        _, wk_rest, _ = split_key_projection(lw.wk, sel, 0)
        base = 2 * sel.r * toy_cfg.n_heads
        with pytest.raises(BudgetError):
            allocate_slrd_split(wk_rest, lw.wv, base + 1, sel.r, toy_cfg)
        with pytest.raises(BudgetError):
            allocate_slrd_split(wk_rest, lw.wv, 10_000, sel.r, toy_cfg)


class TestAllocateConfigs:
    def test_identity_configuration_at_ratio_one(self, toy_cfg):
        configs = allocate_configs(toy_cfg, 1.0, alignment=1)
        identity = [c for c in configs if c.identity]
        assert identity and identity[0].r == toy_cfg.head_dim // 2
        assert identity[0].d_ckv == 0
        assert identity[0].cache_ratio == 1
        assert identity[0].params_after == identity[0].params_original

    def test_reference_shape_quarter_feasible_set(self):
        cfg = ModelConfig.create(32, 32, 128)
        configs = allocate_configs(cfg, 0.25, alignment=128)
        pairs = {(c.r, c.d_ckv) for c in configs}
        assert (8, 1536) in pairs
        assert all(c.params_after <= 2 * cfg.embed_dim * cfg.kv_width for c in configs)
        assert all(c.d_ckv % 128 == 0 for c in configs)
        assert all(c.cache_per_token_layer == 2048 for c in configs)

    def test_eighth_ratio_contains_r4(self):
        cfg = ModelConfig.create(32, 32, 128)
        configs = allocate_configs(cfg, 0.125, alignment=128)
        assert (4, 768) in {(c.r, c.d_ckv) for c in configs}

    def test_infeasible_reports_nearest(self):
        cfg = ModelConfig.create(1, 2, 8)
        with pytest.raises(BudgetError) as exc:
            allocate_configs(cfg, 0.93, alignment=7)
        assert exc.value.nearest

    def test_frobenius_proxy_ranks_ascending(self, toy_cfg, toy_weights):
        configs = allocate_configs(
            toy_cfg, 0.5, alignment=1, proxy="frobenius", weights=toy_weights
        )
        scores = [c.proxy_score for c in configs]
        assert all(s is not None for s in scores)
        assert scores == sorted(scores)

    def test_perplexity_proxy_runs(self, toy_cfg, toy_weights):
        configs = allocate_configs(
            toy_cfg, 0.5, alignment=4, proxy="perplexity", weights=toy_weights,
        )
        assert all(c.proxy_score is not None and c.proxy_score > 0 for c in configs)

    def test_bad_inputs(self, toy_cfg):
        with pytest.raises(ValidationError):
            allocate_configs(toy_cfg, 0.0)
        with pytest.raises(ValidationError):
            allocate_configs(toy_cfg, 0.5, alignment=0)
        with pytest.raises(ValidationError):
            allocate_configs(toy_cfg, 0.5, proxy="magic")
