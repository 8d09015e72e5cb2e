"""Training of the probe bank: align probe attention maps with the attention
maps of real decoded tokens.

Only the probe rows of the embedding change; everything else stays frozen
(verified by checksum). Forward and backward run in float64 here so the
analytic gradient can be held to finite-difference accuracy; the updated
bank is stored back as float32.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .backward import backward_pass
from .engine import forward_trace, greedy_generate, prefill
from .model import Weights
from .sequences import ROLE_PROMPT, ROLE_RESPONSE, ROLE_SOFT, with_response, with_soft_block
from .tokenizer import EOS_ID


@dataclass
class TrainingSample:
    prompt_ids: np.ndarray
    response_ids: np.ndarray


@dataclass
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0


@dataclass
class OptimizerState:
    step: int
    m: np.ndarray  # (n_soft, d_model) float64
    v: np.ndarray
    config: TrainConfig

    @classmethod
    def fresh(cls, n_soft: int, d_model: int, config: TrainConfig) -> "OptimizerState":
        return cls(
            step=0,
            m=np.zeros((n_soft, d_model), dtype=np.float64),
            v=np.zeros((n_soft, d_model), dtype=np.float64),
            config=config,
        )


@dataclass
class LossReport:
    loss: float
    per_layer: np.ndarray
    grad_norm: float = 0.0


def _pair_traces(weights: Weights, sample: TrainingSample):
    cfg = weights.config
    if len(sample.response_ids) == 0:
        raise ValueError("empty response")
    if len(sample.prompt_ids) + cfg.n_soft > cfg.max_seq:
        raise ValueError("prompt plus probe block exceeds max_seq")
    if len(sample.prompt_ids) + len(sample.response_ids) > cfg.max_seq:
        raise ValueError("prompt plus response exceeds max_seq")
    seq_soft = with_soft_block(sample.prompt_ids, cfg.vocab_size, cfg.n_soft)
    seq_resp = with_response(sample.prompt_ids, sample.response_ids)
    trace_soft = forward_trace(weights, seq_soft.ids, dtype=np.float64)
    trace_resp = forward_trace(weights, seq_resp.ids, dtype=np.float64)
    return seq_soft, seq_resp, trace_soft, trace_resp


def _query_mean_map(trace, rows: np.ndarray, prompt_len: int) -> np.ndarray:
    """(n_layers, n_heads, prompt_len): mean over query rows, prompt columns."""
    maps = [lt.probs[:, rows, :prompt_len].mean(axis=1) for lt in trace.layers]
    return np.stack(maps)


def attention_maps_pair(
    weights: Weights, sample: TrainingSample
) -> tuple[np.ndarray, np.ndarray]:
    """Probe-side and response-side attention maps, both (L, H, prompt_len)."""
    seq_soft, seq_resp, trace_soft, trace_resp = _pair_traces(weights, sample)
    d = len(sample.prompt_ids)
    soft_rows = np.flatnonzero(seq_soft.roles == ROLE_SOFT)
    resp_rows = np.flatnonzero(seq_resp.roles == ROLE_RESPONSE)
    a_soft = _query_mean_map(trace_soft, soft_rows, d)
    a_resp = _query_mean_map(trace_resp, resp_rows, d)
    return a_soft, a_resp


def loss_mse(a_soft: np.ndarray, a_resp: np.ndarray) -> LossReport:
    """Per-map (1/d)||diff||^2, averaged uniformly over layers and heads."""
    if a_soft.shape != a_resp.shape:
        raise ValueError("attention map shapes do not match")
    d = a_soft.shape[-1]
    diff = a_soft.astype(np.float64) - a_resp.astype(np.float64)
    per_map = np.square(diff).sum(axis=-1) / d  # (L, H)
    return LossReport(loss=float(per_map.mean()), per_layer=per_map.mean(axis=1))


def _soft_loss_and_grad(weights: Weights, sample: TrainingSample):
    cfg = weights.config
    seq_soft, seq_resp, trace_soft, trace_resp = _pair_traces(weights, sample)
    d = len(sample.prompt_ids)
    n = cfg.n_soft
    soft_rows = np.flatnonzero(seq_soft.roles == ROLE_SOFT)
    resp_rows = np.flatnonzero(seq_resp.roles == ROLE_RESPONSE)
    a_soft = _query_mean_map(trace_soft, soft_rows, d)
    a_resp = _query_mean_map(trace_resp, resp_rows, d)
    report = loss_mse(a_soft, a_resp)

    L, H = cfg.n_layers, cfg.n_heads
    T = len(seq_soft)
    dprobs = np.zeros((L, H, T, T), dtype=np.float64)
    coeff = 2.0 * (a_soft - a_resp) / (L * H * d * n)  # (L, H, d)
    dprobs[:, :, soft_rows[:, None], np.arange(d)[None, :]] = coeff[:, :, None, :]
    grads = backward_pass(weights, trace_soft, dprobs=dprobs)
    return report, grads.embedding[cfg.vocab_size :]


def backward_soft(weights: Weights, sample: TrainingSample) -> np.ndarray:
    """Exact gradient of the alignment loss w.r.t. the probe rows only."""
    _, grad = _soft_loss_and_grad(weights, sample)
    return grad


def adam_step(
    bank: np.ndarray, grad: np.ndarray, state: OptimizerState
) -> tuple[np.ndarray, OptimizerState]:
    """Decoupled-weight-decay Adam update of the probe bank."""
    if bank.shape != grad.shape:
        raise ValueError("bank and gradient shapes do not match")
    if not np.isfinite(grad).all():
        raise ValueError("non-finite gradient; aborting step")
    c = state.config
    g = grad.astype(np.float64)
    state.step += 1
    state.m = c.beta1 * state.m + (1.0 - c.beta1) * g
    state.v = c.beta2 * state.v + (1.0 - c.beta2) * np.square(g)
    m_hat = state.m / (1.0 - c.beta1**state.step)
    v_hat = state.v / (1.0 - c.beta2**state.step)
    update = m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * bank.astype(np.float64)
    new_bank = (bank.astype(np.float64) - c.lr * update).astype(np.float32)
    return new_bank, state


def train(
    weights: Weights,
    dataset: list[TrainingSample],
    config: TrainConfig,
) -> tuple[Weights, list[LossReport], int]:
    """Mini-batch training of the probe bank; everything else is frozen.

    Gradients are accumulated in float64 as a mean over the batch in fixed
    sample order. Oversized samples are skipped and counted.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    cfg = weights.config
    usable = []
    skipped = 0
    for s in dataset:
        plen, rlen = len(s.prompt_ids), len(s.response_ids)
        if plen + cfg.n_soft > cfg.max_seq or plen + rlen > cfg.max_seq or rlen == 0:
            skipped += 1
        else:
            usable.append(s)
    if not usable:
        raise ValueError("all samples exceed max_seq")

    state = OptimizerState.fresh(cfg.n_soft, cfg.d_model, config)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    history: list[LossReport] = []
    for _ in range(config.epochs):
        order = rng.permutation(len(usable))
        for start in range(0, len(usable), config.batch_size):
            batch = [usable[i] for i in order[start : start + config.batch_size]]
            acc = np.zeros((cfg.n_soft, cfg.d_model), dtype=np.float64)
            losses = []
            per_layer = np.zeros(cfg.n_layers, dtype=np.float64)
            for s in batch:
                report, grad = _soft_loss_and_grad(weights, s)
                acc += grad
                losses.append(report.loss)
                per_layer += report.per_layer
            acc /= len(batch)
            per_layer /= len(batch)
            new_bank, state = adam_step(weights.soft_bank, acc, state)
            weights.embedding[cfg.vocab_size :] = new_bank
            history.append(
                LossReport(
                    loss=float(np.mean(losses)),
                    per_layer=per_layer,
                    grad_norm=float(np.linalg.norm(acc)),
                )
            )
    return weights, history, skipped


def make_dataset(
    base_weights: Weights,
    corpus: list[np.ndarray],
    count: int,
    seed: int,
    max_new: int = 8,
) -> list[TrainingSample]:
    """Self-generated training pairs from a corpus of token sequences.

    Each sample keeps the first 90% of a corpus sequence as the prompt, lets
    the base model continue greedily, and truncates that continuation at a
    uniformly random length so probes see responses of varying depth.
    """
    for seq in corpus:
        if len(seq) < 10:
            raise ValueError("corpus sequences must be >= 10 tokens")
    rng = np.random.Generator(np.random.PCG64(seed))
    samples: list[TrainingSample] = []
    while len(samples) < count:
        seq = corpus[int(rng.integers(len(corpus)))]
        prompt = np.asarray(seq[: int(0.9 * len(seq))], dtype=np.int64)
        from .sequences import prompt_sequence

        res = prefill(base_weights, prompt_sequence(prompt))
        gen = greedy_generate(
            base_weights, res.cache, res.last_logits, max_new=max_new, stop_id=EOS_ID
        )
        if len(gen) == 0:
            continue
        trunc = int(rng.integers(1, len(gen) + 1))
        samples.append(TrainingSample(prompt_ids=prompt, response_ids=gen[:trunc]))
    return samples


def dataset_stats(samples: list[TrainingSample]) -> dict:
    return {
        "count": len(samples),
        "avg_prompt_len": float(np.mean([len(s.prompt_ids) for s in samples])),
        "avg_response_len": float(np.mean([len(s.response_ids) for s in samples])),
    }


def loss_curve_to_csv(history: list[LossReport], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "grad_norm"])
        for i, rep in enumerate(history):
            w.writerow([i, f"{rep.loss:.10e}", f"{rep.grad_norm:.10e}"])
