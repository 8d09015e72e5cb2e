import numpy as np
import pytest

from probekv.tasks import (
    ANS_MARK,
    KEY_LEN,
    KEY_MARK,
    QUERY_MARK,
    VAL_LEN,
    VAL_SYMS,
    full_sequence,
    gen_kv_recall,
    gen_needle,
    make_pretrain_corpus,
    make_soft_corpus,
)
from probekv.tokenizer import EOS_ID


class TestNeedle:
    def test_depth_zero_plants_at_position_zero(self):
        task = gen_needle(64, 0.0, seed=1)
        assert task.prompt_ids[0] == KEY_MARK
        assert task.meta["needle_pos"] == 0

    def test_structure_and_gold_derivable(self):
        task = gen_needle(64, 0.5, seed=2)
        ids = task.prompt_ids
        km = int(np.flatnonzero(ids == KEY_MARK)[0])
        qm = int(np.flatnonzero(ids == QUERY_MARK)[0])
        assert ids[-1] == ANS_MARK
        # queried key == planted key; value follows the key directly
        assert np.array_equal(ids[km + 1 : km + 1 + KEY_LEN], ids[qm + 1 : -1])
        v0 = km + 1 + KEY_LEN
        assert np.array_equal(ids[v0 : v0 + VAL_LEN], task.gold_ids)
        assert set(task.gold_ids).issubset(set(VAL_SYMS.tolist()))

    def test_two_seeds_differ_but_share_structure(self):
        a = gen_needle(48, 0.3, seed=3)
        b = gen_needle(48, 0.3, seed=4)
        assert len(a.prompt_ids) == len(b.prompt_ids)
        assert not np.array_equal(a.prompt_ids, b.prompt_ids)

    def test_deterministic_under_seed(self):
        a = gen_needle(48, 0.7, seed=5)
        b = gen_needle(48, 0.7, seed=5)
        assert np.array_equal(a.prompt_ids, b.prompt_ids)
        assert np.array_equal(a.gold_ids, b.gold_ids)

    def test_small_context_rejected(self):
        with pytest.raises(ValueError):
            gen_needle(16, 0.5, seed=0)


class TestKvRecall:
    def test_head_tail_share_bindings(self):
        head = gen_kv_recall(5, "head", seed=9)
        tail = gen_kv_recall(5, "tail", seed=9)
        # strip the query block: head has it at the front, tail before ANS_MARK
        qlen = 1 + KEY_LEN
        head_bindings = head.prompt_ids[qlen:-1]
        tail_bindings = tail.prompt_ids[: -qlen - 1]
        assert np.array_equal(head_bindings, tail_bindings)
        assert np.array_equal(head.gold_ids, tail.gold_ids)

    def test_gold_verified_by_brute_force(self):
        for seed in range(10):
            task = gen_kv_recall(4, "tail", seed=seed)
            ids = task.prompt_ids
            qm = int(np.flatnonzero(ids == QUERY_MARK)[-1])
            key = ids[qm + 1 : qm + 1 + KEY_LEN]
            # scan bindings for the key and read its value
            kms = np.flatnonzero(ids[:qm] == KEY_MARK)
            found = None
            for km in kms:
                if np.array_equal(ids[km + 1 : km + 1 + KEY_LEN], key):
                    v0 = km + 1 + KEY_LEN
                    found = ids[v0 : v0 + VAL_LEN]
            assert found is not None
            assert np.array_equal(found, task.gold_ids)

    def test_min_pairs_enforced(self):
        with pytest.raises(ValueError):
            gen_kv_recall(1, "tail", seed=0)

    def test_deterministic(self):
        a = gen_kv_recall(3, "head", seed=11)
        b = gen_kv_recall(3, "head", seed=11)
        assert np.array_equal(a.prompt_ids, b.prompt_ids)


class TestCorpora:
    def test_full_sequence_appends_gold_and_eos(self):
        task = gen_needle(48, 0.5, seed=1)
        seq = full_sequence(task)
        assert np.array_equal(seq[: len(task.prompt_ids)], task.prompt_ids)
        assert seq[-1] == EOS_ID
        assert np.array_equal(seq[len(task.prompt_ids) : -1], task.gold_ids)

    def test_pretrain_corpus_shapes(self):
        corpus = make_pretrain_corpus(40, seed=0, ctx_lens=(48,), n_pairs_range=(2, 4))
        assert len(corpus) == 40
        for seq, sup in corpus:
            assert sup.shape == seq.shape and sup.dtype == bool
            assert not sup[0]
            assert sup.sum() >= 2

    def test_soft_corpus_ninety_percent_is_prompt(self):
        corpus = make_soft_corpus(20, seed=0, ctx_lens=(48, 64), n_pairs_range=(2, 4))
        for seq in corpus:
            cut = int(0.9 * len(seq))
            assert seq[cut - 1] == ANS_MARK

    def test_corpora_deterministic(self):
        a = make_soft_corpus(5, seed=3)
        b = make_soft_corpus(5, seed=3)
        for s, t in zip(a, b):
            assert np.array_equal(s, t)
