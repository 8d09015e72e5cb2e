"""Finite-difference validation of the hand-written backward pass."""

import numpy as np
import pytest

from conftest import tiny_config

from probekv.model import Weights, LayerWeights, init_model, clone_weights
from probekv.trainer import (
    TrainingSample,
    attention_maps_pair,
    backward_soft,
    loss_mse,
)


def weights_to_f64(w: Weights) -> Weights:
    out = clone_weights(w)
    out.embedding = out.embedding.astype(np.float64)
    out.g_final = out.g_final.astype(np.float64)
    for lw in out.layers:
        for nm in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "g_attn", "g_mlp"):
            setattr(lw, nm, getattr(lw, nm).astype(np.float64))
    return out


def soft_loss(weights, sample) -> float:
    a_soft, a_resp = attention_maps_pair(weights, sample)
    return loss_mse(a_soft, a_resp).loss


def central_diff(loss_fn, tensor, idx, h=1e-3) -> float:
    orig = tensor[idx]
    tensor[idx] = orig + h
    up = loss_fn()
    tensor[idx] = orig - h
    down = loss_fn()
    tensor[idx] = orig
    return (up - down) / (2.0 * h)


@pytest.fixture
def fd_setup():
    rng = np.random.Generator(np.random.PCG64(77))
    w = weights_to_f64(init_model(tiny_config(n_soft=4), seed=31))
    prompt = rng.integers(0, 258, size=24).astype(np.int64)
    response = rng.integers(0, 258, size=5).astype(np.int64)
    return w, TrainingSample(prompt_ids=prompt, response_ids=response)


class TestSoftGradient:
    def test_matches_finite_differences(self, fd_setup):
        # acceptance criterion: h=1e-3, 64-bit forward, >=20 random coords,
        # max relative error < 1e-4
        w, sample = fd_setup
        grad = backward_soft(w, sample)
        cfg = w.config
        bank = w.embedding[cfg.vocab_size :]
        rng = np.random.Generator(np.random.PCG64(99))
        max_rel = 0.0
        for _ in range(24):
            i = int(rng.integers(cfg.n_soft))
            j = int(rng.integers(cfg.d_model))
            fd = central_diff(lambda: soft_loss(w, sample), bank, (i, j))
            denom = max(abs(fd), abs(grad[i, j]), 1e-8)
            max_rel = max(max_rel, abs(fd - grad[i, j]) / denom)
        assert max_rel < 1e-4, f"max relative error {max_rel:.3e}"

    def test_zero_loss_at_exact_match_construction(self):
        # response embeddings identical to probe embeddings -> identical maps
        w = init_model(tiny_config(n_soft=3), seed=8)
        cfg = w.config
        resp_ids = np.array([10, 11, 12], dtype=np.int64)
        w.embedding[resp_ids] = w.soft_bank.copy()
        sample = TrainingSample(
            prompt_ids=np.arange(20, 36, dtype=np.int64), response_ids=resp_ids
        )
        a_soft, a_resp = attention_maps_pair(w, sample)
        assert loss_mse(a_soft, a_resp).loss == 0.0
        grad = backward_soft(w, sample)
        assert np.linalg.norm(grad) < 1e-8

    def test_duplicated_rows_halve_per_row_gradient(self):
        # doubling the probe count with duplicated rows roughly halves each
        # row's gradient via the 1/n in the query mean. The halving is not
        # exact: the duplicate's own key drains softmax mass (a coupling this
        # backward pass includes on purpose), so the band below brackets the
        # measured ratios (~0.48 at this scale) rather than asserting 0.5.
        rng = np.random.Generator(np.random.PCG64(13))
        cfgkw = dict(d_model=64, n_layers=2, n_heads=4, n_kv_heads=2, head_dim=16,
                     mlp_hidden=128)
        prompt = rng.integers(0, 258, size=96).astype(np.int64)
        response = rng.integers(0, 258, size=4).astype(np.int64)
        sample = TrainingSample(prompt_ids=prompt, response_ids=response)

        w1 = init_model(tiny_config(n_soft=1, **cfgkw), seed=5)
        w2 = init_model(tiny_config(n_soft=2, **cfgkw), seed=5)
        w2.embedding[: w2.config.vocab_size] = w1.embedding[: w1.config.vocab_size]
        w2.embedding[w2.config.vocab_size :] = w1.soft_bank[0][None, :]
        for lw1, lw2 in zip(w1.layers, w2.layers):
            for nm in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "g_attn", "g_mlp"):
                setattr(lw2, nm, getattr(lw1, nm).copy())
        w2.g_final = w1.g_final.copy()

        g1 = backward_soft(weights_to_f64(w1), sample)
        g2 = backward_soft(weights_to_f64(w2), sample)
        assert 0.4 < np.linalg.norm(g2[0]) / np.linalg.norm(g1[0]) < 0.6
        assert 0.4 < np.linalg.norm(g2[1]) / np.linalg.norm(g1[0]) < 0.6


class TestPretrainGradient:
    def test_matches_finite_differences_across_parameter_kinds(self):
        from probekv.pretrain import answer_loss_and_grads

        rng = np.random.Generator(np.random.PCG64(21))
        w = weights_to_f64(init_model(tiny_config(), seed=17))
        ids = rng.integers(0, 258, size=18).astype(np.int64)
        sup = np.zeros(18, dtype=bool)
        sup[[5, 9, 12, 17]] = True

        def loss_fn():
            return answer_loss_and_grads(w, ids, sup, dtype=np.float64)[0]

        _, grads = answer_loss_and_grads(w, ids, sup, dtype=np.float64)
        gmap = dict(grads.named_tensors())
        checks = [
            ("embedding", w.embedding, (int(ids[3]), 2)),
            ("embedding", w.embedding, (int(ids[-1]), 5)),
            ("layers.0.wq", w.layers[0].wq, (3, 7)),
            ("layers.1.wk", w.layers[1].wk, (1, 4)),
            ("layers.0.wv", w.layers[0].wv, (2, 2)),
            ("layers.1.wo", w.layers[1].wo, (5, 3)),
            ("layers.0.w_gate", w.layers[0].w_gate, (4, 9)),
            ("layers.1.w_down", w.layers[1].w_down, (11, 6)),
            ("layers.0.g_attn", w.layers[0].g_attn, (5,)),
            ("layers.1.g_mlp", w.layers[1].g_mlp, (9,)),
            ("g_final", w.g_final, (3,)),
        ]
        for name, tensor, idx in checks:
            fd = central_diff(loss_fn, tensor, idx, h=1e-4)
            got = gmap[name][idx]
            denom = max(abs(fd), abs(got), 1e-7)
            assert abs(fd - got) / denom < 1e-4, f"{name}{idx}: fd={fd:.6e} got={got:.6e}"
