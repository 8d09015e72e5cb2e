import numpy as np
import pytest

from oracles import (
    ref_hit_rate,
    ref_query_mean_scores,
    ref_snapkv_scores,
    ref_topk,
)

from probekv.engine import AttentionRecord, greedy_generate, prefill
from probekv.eviction import (
    BudgetSchedule,
    allocate_pyramid,
    compact_cache,
    full_plan,
    hit_rate,
    plan_streaming,
    score_h2o,
    score_response,
    score_snapkv,
    score_soft,
    select_topk,
    uniform_schedule,
)
from probekv.model import init_model
from probekv.sequences import (
    ROLE_PROMPT,
    ROLE_RESPONSE,
    ROLE_SOFT,
    TokenSequence,
    prompt_sequence,
    with_soft_block,
)
from conftest import tiny_config


def random_record(rng, n_layers, n_heads, prompt_len, tail_role, tail_len):
    """Row-stochastic causal attention with a prompt block plus a tail block."""
    T = prompt_len + tail_len
    probs = rng.random((n_layers, n_heads, T, T)).astype(np.float32)
    mask = np.tril(np.ones((T, T), dtype=np.float32))
    probs *= mask
    probs /= probs.sum(axis=-1, keepdims=True)
    roles = np.concatenate(
        [np.full(prompt_len, ROLE_PROMPT, np.uint8), np.full(tail_len, tail_role, np.uint8)]
    )
    record = AttentionRecord(probs=probs, positions=np.arange(T), roles=roles)
    ids = np.concatenate([np.arange(prompt_len), np.arange(tail_len)])
    seq = TokenSequence(ids.astype(np.int64), roles)
    return record, seq


class TestScoreSoft:
    def test_single_probe_row_is_its_prompt_slice(self):
        rng = np.random.Generator(np.random.PCG64(0))
        record, seq = random_record(rng, 1, 2, 5, ROLE_SOFT, 1)
        scores = score_soft(record, seq, n_kv_heads=2)
        np.testing.assert_allclose(scores.values[0], record.probs[0, :, 5, :5], atol=1e-7)

    def test_uniform_rows_give_uniform_scores(self):
        p, n = 6, 3
        T = p + n
        probs = np.zeros((1, 2, T, T), dtype=np.float32)
        for t in range(T):
            probs[:, :, t, : t + 1] = 1.0 / (t + 1)
        roles = np.concatenate([np.full(p, ROLE_PROMPT, np.uint8), np.full(n, ROLE_SOFT, np.uint8)])
        record = AttentionRecord(probs=probs, positions=np.arange(T), roles=roles)
        seq = TokenSequence(np.arange(T, dtype=np.int64), roles)
        scores = score_soft(record, seq, n_kv_heads=2)
        for g in range(2):
            assert np.allclose(scores.values[0, g], scores.values[0, g][0])

    def test_brute_force_oracle(self):
        rng = np.random.Generator(np.random.PCG64(1))
        record, seq = random_record(rng, 2, 2, 8, ROLE_SOFT, 3)
        scores = score_soft(record, seq, n_kv_heads=2)
        rows = np.arange(8, 11)
        want = ref_query_mean_scores(record.probs, rows, 8, 2)
        np.testing.assert_allclose(scores.values, want, atol=1e-6)

    def test_missing_soft_block_raises(self):
        rng = np.random.Generator(np.random.PCG64(2))
        record, seq = random_record(rng, 1, 2, 5, ROLE_RESPONSE, 2)
        with pytest.raises(ValueError):
            score_soft(record, seq, n_kv_heads=2)


class TestScoreResponse:
    def test_same_rows_match_score_soft(self):
        rng = np.random.Generator(np.random.PCG64(3))
        record_r, seq_r = random_record(rng, 2, 2, 7, ROLE_RESPONSE, 2)
        record_s = AttentionRecord(
            probs=record_r.probs, positions=record_r.positions,
            roles=np.where(record_r.roles == ROLE_RESPONSE, ROLE_SOFT, ROLE_PROMPT).astype(np.uint8),
        )
        seq_s = TokenSequence(seq_r.ids, record_s.roles)
        a = score_response(record_r, seq_r, n_kv_heads=2)
        b = score_soft(record_s, seq_s, n_kv_heads=2)
        np.testing.assert_array_equal(a.values, b.values)

    def test_single_row(self):
        rng = np.random.Generator(np.random.PCG64(4))
        record, seq = random_record(rng, 1, 2, 6, ROLE_RESPONSE, 1)
        scores = score_response(record, seq, n_kv_heads=2)
        np.testing.assert_allclose(scores.values[0], record.probs[0, :, 6, :6], atol=1e-7)

    def test_brute_force_oracle(self):
        rng = np.random.Generator(np.random.PCG64(5))
        record, seq = random_record(rng, 3, 4, 9, ROLE_RESPONSE, 4)
        scores = score_response(record, seq, n_kv_heads=2)
        want = ref_query_mean_scores(record.probs, np.arange(9, 13), 9, 2)
        np.testing.assert_allclose(scores.values, want, atol=1e-6)

    def test_empty_response_raises(self):
        rng = np.random.Generator(np.random.PCG64(6))
        record, seq = random_record(rng, 1, 2, 5, ROLE_SOFT, 1)
        with pytest.raises(ValueError):
            score_response(record, seq, n_kv_heads=2)


class TestScoreWindowed:
    def test_pool_one_is_plain_windowed_sum(self):
        rng = np.random.Generator(np.random.PCG64(7))
        record, _ = random_record(rng, 2, 2, 10, ROLE_SOFT, 0)
        a = score_snapkv(record, window=4, pool=1, n_kv_heads=2)
        b = score_h2o(record, window=4, n_kv_heads=2)
        np.testing.assert_array_equal(a.values, b.values)

    def test_window_equal_prompt_gives_column_sums(self):
        rng = np.random.Generator(np.random.PCG64(8))
        record, _ = random_record(rng, 1, 2, 6, ROLE_SOFT, 0)
        scores = score_snapkv(record, window=6, pool=1, n_kv_heads=2)
        want = record.probs[0, :, :6, :6].sum(axis=1).reshape(2, 6)
        np.testing.assert_allclose(scores.values[0], want, atol=1e-6)

    def test_window_clamped_to_prompt(self):
        rng = np.random.Generator(np.random.PCG64(9))
        record, _ = random_record(rng, 1, 2, 5, ROLE_SOFT, 0)
        a = score_snapkv(record, window=50, pool=3, n_kv_heads=2)
        b = score_snapkv(record, window=5, pool=3, n_kv_heads=2)
        np.testing.assert_array_equal(a.values, b.values)

    def test_h2o_window_one_is_last_row(self):
        rng = np.random.Generator(np.random.PCG64(10))
        record, _ = random_record(rng, 1, 2, 7, ROLE_SOFT, 0)
        scores = score_h2o(record, window=1, n_kv_heads=2)
        np.testing.assert_allclose(scores.values[0], record.probs[0, :, 6, :7], atol=1e-7)

    def test_brute_force_window32_pool7(self):
        rng = np.random.Generator(np.random.PCG64(11))
        record, _ = random_record(rng, 2, 4, 40, ROLE_SOFT, 0)
        scores = score_snapkv(record, window=32, pool=7, n_kv_heads=2)
        want = ref_snapkv_scores(record.probs, 40, 32, 7, 2)
        np.testing.assert_allclose(scores.values, want, atol=1e-6)

    def test_even_pool_rejected(self):
        rng = np.random.Generator(np.random.PCG64(12))
        record, _ = random_record(rng, 1, 2, 6, ROLE_SOFT, 0)
        with pytest.raises(ValueError):
            score_snapkv(record, window=3, pool=4, n_kv_heads=2)


class TestStreaming:
    def test_forced_example(self):
        plan = plan_streaming(10, budget=6, sinks=2, n_layers=1, n_kv_heads=1)
        assert plan.kept[0][0].tolist() == [0, 1, 6, 7, 8, 9]

    def test_budget_covers_prompt(self):
        plan = plan_streaming(5, budget=9, sinks=2, n_layers=2, n_kv_heads=2)
        for layer in plan.kept:
            for kept in layer:
                assert kept.tolist() == [0, 1, 2, 3, 4]

    def test_plan_size_random(self):
        rng = np.random.Generator(np.random.PCG64(13))
        for _ in range(50):
            p = int(rng.integers(6, 60))
            budget = int(rng.integers(5, 70))
            plan = plan_streaming(p, budget, sinks=4, n_layers=2, n_kv_heads=2)
            assert len(plan.kept[0][0]) == min(budget, p)

    def test_budget_below_sinks_raises(self):
        with pytest.raises(ValueError):
            plan_streaming(10, budget=4, sinks=4, n_layers=1, n_kv_heads=1)


class TestPyramid:
    def test_single_layer(self):
        sched = allocate_pyramid(16, 1, 4)
        assert sched.per_layer.tolist() == [16]

    def test_direct_example(self):
        sched = allocate_pyramid(8, 4, 2)
        assert sched.per_layer.tolist() == [14, 10, 6, 2]
        assert sched.per_layer.sum() == 32

    def test_sum_preserved_100_random(self):
        rng = np.random.Generator(np.random.PCG64(14))
        for _ in range(100):
            layers = int(rng.integers(1, 9))
            nominal = int(rng.integers(2, 80))
            floor = int(rng.integers(1, nominal + 1))
            sched = allocate_pyramid(nominal, layers, floor)
            assert sched.per_layer.sum() == nominal * layers
            assert (np.diff(sched.per_layer) <= 0).all()
            assert (sched.per_layer >= floor).all() or layers == 1

    def test_floor_above_nominal_rejected(self):
        with pytest.raises(ValueError):
            allocate_pyramid(4, 3, 5)


def scores_from(vals, policy="x"):
    from probekv.eviction import ImportanceScores

    arr = np.asarray(vals, dtype=np.float32)[None, None, :]
    return ImportanceScores(values=arr, prompt_len=arr.shape[-1], policy=policy)


class TestSelectTopk:
    def test_simple_example(self):
        plan = select_topk(scores_from([0.1, 0.9, 0.5, 0.2]), uniform_schedule(2, 1))
        assert plan.kept[0][0].tolist() == [1, 2]

    def test_tie_break_earliest(self):
        plan = select_topk(scores_from([0.3, 0.3, 0.3, 0.3]), uniform_schedule(2, 1))
        assert plan.kept[0][0].tolist() == [0, 1]

    def test_protect_last(self):
        plan = select_topk(scores_from([0.9, 0.8, 0.0, 0.0]), uniform_schedule(3, 1), protect_last=2)
        assert plan.kept[0][0].tolist() == [0, 2, 3]

    def test_budget_exceeds_prompt_keeps_all(self):
        plan = select_topk(scores_from([0.1, 0.2]), uniform_schedule(7, 1))
        assert plan.kept[0][0].tolist() == [0, 1]

    def test_budget_below_protect_raises(self):
        with pytest.raises(ValueError):
            select_topk(scores_from([0.1, 0.2, 0.3]), uniform_schedule(1, 1), protect_last=2)

    def test_matches_sort_slice_reference_1000(self):
        rng = np.random.Generator(np.random.PCG64(15))
        for _ in range(1000):
            p = int(rng.integers(2, 40))
            vals = np.round(rng.random(p), 2)  # rounding forces frequent ties
            budget = int(rng.integers(1, p + 4))
            protect = int(rng.integers(0, min(budget, p) + 1))
            plan = select_topk(scores_from(vals), uniform_schedule(budget, 1), protect_last=protect)
            want = ref_topk(vals, budget, protect)
            assert plan.kept[0][0].tolist() == want.tolist()

    def test_scale_invariance(self):
        rng = np.random.Generator(np.random.PCG64(16))
        for c in (0.5, 3.0, 1e4):
            vals = rng.random(20)
            a = select_topk(scores_from(vals), uniform_schedule(7, 1))
            b = select_topk(scores_from(vals * c), uniform_schedule(7, 1))
            assert a.kept[0][0].tolist() == b.kept[0][0].tolist()


class TestCompactAndHitRate:
    def test_full_plan_drops_only_soft_rows(self):
        w = init_model(tiny_config(), seed=1)
        ids = np.arange(10, 18)
        seq = with_soft_block(ids, w.config.vocab_size, w.config.n_soft)
        res = prefill(w, seq)
        plan = full_plan(len(ids), w.config.n_layers, w.config.n_kv_heads)
        cache = compact_cache(res.cache, plan)
        assert cache.rows_per_head().max() == len(ids)
        assert cache.next_position == len(ids)
        for layer in cache.positions:
            for pos in layer:
                assert pos.tolist() == list(range(len(ids)))

    def test_identity_eviction_token_identical(self):
        w = init_model(tiny_config(), seed=3)
        ids = np.arange(30, 42)
        res_full = prefill(w, prompt_sequence(ids))
        baseline = greedy_generate(w, res_full.cache.clone(), res_full.last_logits, max_new=8)
        plan = full_plan(len(ids), w.config.n_layers, w.config.n_kv_heads)
        compacted = compact_cache(res_full.cache, plan)
        again = greedy_generate(w, compacted, res_full.last_logits, max_new=8)
        assert baseline.tolist() == again.tolist()

    def test_row_counts_match_plan_sizes(self):
        rng = np.random.Generator(np.random.PCG64(17))
        w = init_model(tiny_config(), seed=4)
        ids = np.arange(16)
        res = prefill(w, prompt_sequence(ids))
        kept = [
            [np.sort(rng.choice(16, size=int(rng.integers(1, 17)), replace=False)).astype(np.int64)
             for _ in range(w.config.n_kv_heads)]
            for _ in range(w.config.n_layers)
        ]
        from probekv.eviction import EvictionPlan

        plan = EvictionPlan(kept=kept, budget=16, prompt_len=16)
        cache = compact_cache(res.cache, plan)
        for li in range(w.config.n_layers):
            for g in range(w.config.n_kv_heads):
                assert len(cache.positions[li][g]) == len(kept[li][g])
                assert cache.keys[li][g].shape[0] == len(kept[li][g])

    def test_missing_position_raises(self):
        w = init_model(tiny_config(), seed=4)
        res = prefill(w, prompt_sequence(np.arange(5)))
        from probekv.eviction import EvictionPlan

        bad = EvictionPlan(
            kept=[[np.array([0, 9])] * w.config.n_kv_heads] * w.config.n_layers,
            budget=2, prompt_len=5,
        )
        with pytest.raises(ValueError):
            compact_cache(res.cache, bad)

    def test_hit_rate_examples(self):
        def plan_of(sets):
            from probekv.eviction import EvictionPlan

            kept = [[np.array(s, dtype=np.int64) for s in layer] for layer in sets]
            return EvictionPlan(kept=kept, budget=4, prompt_len=10)

        a = plan_of([[[1, 2, 3, 4]]])
        b = plan_of([[[3, 4, 5, 6]]])
        assert hit_rate(a, a) == 1.0
        assert hit_rate(plan_of([[[0, 1]]]), plan_of([[[2, 3]]])) == 0.0
        assert hit_rate(a, b) == 0.5

    def test_hit_rate_random_vs_reference(self):
        rng = np.random.Generator(np.random.PCG64(18))
        from probekv.eviction import EvictionPlan

        for _ in range(25):
            L, G, p, k = 2, 2, 20, 6
            def rand_plan():
                kept = [
                    [np.sort(rng.choice(p, size=k, replace=False)).astype(np.int64) for _ in range(G)]
                    for _ in range(L)
                ]
                return EvictionPlan(kept=kept, budget=k, prompt_len=p)

            a, b = rand_plan(), rand_plan()
            assert abs(hit_rate(a, b) - ref_hit_rate(a.kept, b.kept)) < 1e-12

    def test_hit_rate_structure_mismatch_raises(self):
        from probekv.eviction import EvictionPlan

        a = EvictionPlan(kept=[[np.array([0, 1])]], budget=2, prompt_len=5)
        b = EvictionPlan(kept=[[np.array([0, 1])] * 2], budget=2, prompt_len=5)
        with pytest.raises(ValueError):
            hit_rate(a, b)
