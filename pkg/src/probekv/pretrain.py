"""Next-token pre-training of the base weights on task-format data.

This is harness plumbing: probe training never touches base weights, but
eviction quality is only measurable once FullKV solves the tasks, so the
bundled pipeline first fits the base model here. The loss is next-token
cross-entropy masked to the answer region (the filler is uniform noise and
carries no signal). Plain Adam without weight decay, so unused rows -- in
particular the probe rows -- stay bit-identical.
"""

from __future__ import annotations

import numpy as np

from .backward import backward_pass
from .engine import forward_trace
from .model import Weights


def answer_loss_and_grads(
    weights: Weights, ids: np.ndarray, supervised, dtype=np.float32
):
    """Cross-entropy over the supervised positions.

    `supervised` is either a boolean mask over the sequence (True where the
    token itself must be predicted from its left context) or an integer
    start index meaning "every position from here on".
    """
    ids = np.asarray(ids, dtype=np.int64)
    T = len(ids)
    if np.isscalar(supervised) or np.ndim(supervised) == 0:
        start = int(supervised)
        if not 0 < start < T:
            raise ValueError("answer start must fall inside the sequence")
        mask = np.zeros(T, dtype=bool)
        mask[start:] = True
    else:
        mask = np.asarray(supervised, dtype=bool)
        if mask.shape != (T,):
            raise ValueError("supervision mask must match the sequence length")
        if mask[0]:
            raise ValueError("position 0 has no left context to predict from")
    rows = np.flatnonzero(mask) - 1  # predict ids[r+1] from position r
    if len(rows) == 0:
        raise ValueError("no supervised positions")
    trace = forward_trace(weights, ids, dtype=dtype)
    logits = trace.logits.astype(np.float64)
    targets = ids[rows + 1]
    shifted = logits[rows] - logits[rows].max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(len(rows)), targets]))

    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    dlogits = np.zeros_like(trace.logits)
    dl = probs
    dl[np.arange(len(rows)), targets] -= 1.0
    dlogits[rows] = (dl / len(rows)).astype(dtype)
    grads = backward_pass(weights, trace, dlogits=dlogits)
    return loss, grads


def _clip_global(named_grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.square(g.astype(np.float64)).sum()) for g in named_grads.values()))
    if total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in named_grads.items()}
    return named_grads


def pretrain(
    weights: Weights,
    corpus: list[tuple[np.ndarray, int]],
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    clip: float = 1.0,
    warmup: int = 100,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    log_every: int = 0,
    eval_fn=None,
    eval_every: int = 0,
) -> list[float]:
    """Adam over all parameters; deterministic batch order from the seed.

    `warmup` ramps the learning rate linearly over the first steps, which
    keeps early Adam updates from wrecking the init.
    """
    rng = np.random.Generator(np.random.PCG64([seed, 0xBA5E]))
    names = [name for name, _ in weights.named_tensors()]
    tensors = dict(weights.named_tensors())
    m = {n: np.zeros(tensors[n].shape, dtype=np.float64) for n in names}
    v = {n: np.zeros(tensors[n].shape, dtype=np.float64) for n in names}
    history = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(corpus), size=batch_size)
        acc = {n: np.zeros(tensors[n].shape, dtype=np.float64) for n in names}
        losses = []
        for i in idx:
            seq, supervised = corpus[int(i)]
            loss, grads = answer_loss_and_grads(weights, seq, supervised)
            losses.append(loss)
            for n, g in grads.named_tensors():
                acc[n] += g
        for n in names:
            acc[n] /= batch_size
        acc = _clip_global(acc, clip)
        step_lr = lr * min(1.0, step / warmup) if warmup else lr
        bc1 = 1.0 - beta1**step
        bc2 = 1.0 - beta2**step
        for n in names:
            m[n] = beta1 * m[n] + (1.0 - beta1) * acc[n]
            v[n] = beta2 * v[n] + (1.0 - beta2) * np.square(acc[n])
            update = (m[n] / bc1) / (np.sqrt(v[n] / bc2) + eps)
            tensors[n][...] = (tensors[n].astype(np.float64) - step_lr * update).astype(np.float32)
        history.append(float(np.mean(losses)))
        if log_every and step % log_every == 0:
            print(f"pretrain step {step}/{steps} loss {history[-1]:.4f}")
        if eval_fn is not None and eval_every and step % eval_every == 0:
            eval_fn(step)
    return history
