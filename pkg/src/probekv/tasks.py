"""Synthetic retrieval tasks over a structured token-id vocabulary.

Tasks live directly in token-id space: marker ids sit above the byte range
and key/value/filler symbols occupy dedicated ranges, so a gold answer is
always derivable from the prompt alone and never collides with filler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tokenizer import EOS_ID

KEY_MARK = 258
QUERY_MARK = 260
ANS_MARK = 261
SEP = 262

KEY_SYMS = np.arange(264, 264 + 16, dtype=np.int64)
VAL_SYMS = np.arange(300, 300 + 16, dtype=np.int64)
FILL_SYMS = np.arange(340, 340 + 64, dtype=np.int64)

KEY_LEN = 1
VAL_LEN = 2


@dataclass
class TaskInstance:
    prompt_ids: np.ndarray
    gold_ids: np.ndarray
    meta: dict = field(default_factory=dict)


def derive_seeds(root: int, n: int, salt: int = 0) -> np.ndarray:
    """n independent child seeds from one root; deterministic."""
    return np.random.SeedSequence([root, salt]).generate_state(n)


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gen_needle(ctx_len: int, depth_frac: float, seed) -> TaskInstance:
    """A key->value pair buried in filler at the requested depth.

    The question (the key) sits at the tail; the gold answer is the bound
    value symbols.
    """
    if ctx_len < 32:
        raise ValueError("ctx_len must be >= 32")
    if not 0.0 <= depth_frac <= 1.0:
        raise ValueError("depth_frac must be in [0, 1]")
    rng = _rng(seed)
    body = rng.choice(FILL_SYMS, size=ctx_len)
    key = rng.choice(KEY_SYMS, size=KEY_LEN)
    val = rng.choice(VAL_SYMS, size=VAL_LEN)
    needle = np.concatenate([[KEY_MARK], key, val]).astype(np.int64)
    pos = min(int(depth_frac * ctx_len), ctx_len - len(needle))
    body[pos : pos + len(needle)] = needle
    question = np.concatenate([[QUERY_MARK], key, [ANS_MARK]]).astype(np.int64)
    prompt = np.concatenate([body, question])
    return TaskInstance(
        prompt_ids=prompt.astype(np.int64),
        gold_ids=val.copy(),
        meta={
            "kind": "needle",
            "depth_frac": float(depth_frac),
            "needle_pos": int(pos),
            "question_position": "tail",
            "seed": int(np.asarray(seed).ravel()[0]) if np.ndim(seed) else int(seed),
        },
    )


def gen_kv_recall(n_pairs: int, query_position: str, seed) -> TaskInstance:
    """Several key->value bindings; one key is queried from the head or tail.

    All random draws happen before placement, so the head and tail variants
    of one seed share identical binding blocks and queried key.
    """
    if n_pairs < 2:
        raise ValueError("n_pairs must be >= 2")
    if query_position not in ("head", "tail"):
        raise ValueError("query_position must be 'head' or 'tail'")
    rng = _rng(seed)
    combos = rng.choice(len(KEY_SYMS) ** KEY_LEN, size=n_pairs, replace=False)
    keys = np.stack(
        [KEY_SYMS[(combos // (len(KEY_SYMS) ** i)) % len(KEY_SYMS)] for i in range(KEY_LEN)],
        axis=1,
    )
    vals = rng.choice(VAL_SYMS, size=(n_pairs, VAL_LEN))
    q = int(rng.integers(n_pairs))

    bindings = []
    for i in range(n_pairs):
        bindings.append(np.concatenate([[KEY_MARK], keys[i], vals[i], [SEP]]))
    bindings = np.concatenate(bindings).astype(np.int64)
    query = np.concatenate([[QUERY_MARK], keys[q]]).astype(np.int64)
    tail_mark = np.array([ANS_MARK], dtype=np.int64)
    if query_position == "head":
        prompt = np.concatenate([query, bindings, tail_mark])
    else:
        prompt = np.concatenate([bindings, query, tail_mark])
    return TaskInstance(
        prompt_ids=prompt,
        gold_ids=vals[q].astype(np.int64).copy(),
        meta={
            "kind": "kv_recall",
            "n_pairs": int(n_pairs),
            "question_position": query_position,
            "seed": int(np.asarray(seed).ravel()[0]) if np.ndim(seed) else int(seed),
        },
    )


def full_sequence(task: TaskInstance) -> np.ndarray:
    """Prompt followed by the gold answer and EOS; next-token training data."""
    return np.concatenate([task.prompt_ids, task.gold_ids, [EOS_ID]]).astype(np.int64)


def _mask_from(seq_len: int, positions) -> np.ndarray:
    mask = np.zeros(seq_len, dtype=bool)
    mask[np.asarray(positions, dtype=np.int64)] = True
    return mask


def _multi_query_recall(rng, n_pairs: int, head_first: bool):
    """Bindings plus several query->answer rounds; dense retrieval signal.

    The first round matches the evaluation format (question at head or
    tail); later rounds are always tail-shaped. Supervised positions are
    the answer values and the final EOS.
    """
    combos = rng.choice(len(KEY_SYMS) ** KEY_LEN, size=n_pairs, replace=False)
    keys = np.stack(
        [KEY_SYMS[(combos // (len(KEY_SYMS) ** i)) % len(KEY_SYMS)] for i in range(KEY_LEN)],
        axis=1,
    )
    vals = rng.choice(VAL_SYMS, size=(n_pairs, VAL_LEN))
    n_queries = int(rng.integers(1, min(n_pairs, 3) + 1))
    order = rng.choice(n_pairs, size=n_queries, replace=False)

    bindings = np.concatenate(
        [np.concatenate([[KEY_MARK], keys[i], vals[i], [SEP]]) for i in range(n_pairs)]
    ).astype(np.int64)

    parts = []
    supervised = []

    def emit(tokens, mark):
        start = sum(len(p) for p in parts)
        parts.append(np.asarray(tokens, dtype=np.int64))
        if mark:
            supervised.extend(range(start, start + len(tokens)))

    q0 = order[0]
    if head_first:
        emit(np.concatenate([[QUERY_MARK], keys[q0]]), False)
        emit(bindings, False)
        emit([ANS_MARK], False)
        emit(vals[q0], True)
    else:
        emit(bindings, False)
        emit(np.concatenate([[QUERY_MARK], keys[q0], [ANS_MARK]]), False)
        emit(vals[q0], True)
    for q in order[1:]:
        emit(np.concatenate([[QUERY_MARK], keys[q], [ANS_MARK]]), False)
        emit(vals[q], True)
    emit([EOS_ID], True)
    seq = np.concatenate(parts)
    return seq, _mask_from(len(seq), supervised)


def _copy_sequence(rng, length: int):
    """A pattern repeated once; the second half is supervised. This is the
    classic inducer for previous-token and match-and-copy attention."""
    pool = np.concatenate([KEY_SYMS, VAL_SYMS, FILL_SYMS])
    pat = rng.choice(pool, size=length)
    seq = np.concatenate([pat, pat]).astype(np.int64)
    return seq, _mask_from(len(seq), np.arange(length, 2 * length))


def make_pretrain_corpus(
    count: int,
    seed: int,
    ctx_lens=(48, 64, 96, 128),
    n_pairs_range=(2, 6),
    mix=(0.3, 0.5, 0.2),
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(sequence, supervision mask) pairs for next-token pre-training.

    The mix is (needle, multi-query recall, copy). Recall rounds alternate
    head/tail placement of the first question so the base model learns both
    orders; copy sequences densify the match-and-copy signal.
    """
    rng = _rng([seed, 1])
    seeds = derive_seeds(seed, count, salt=2)
    kinds = rng.choice(3, size=count, p=list(mix))
    out = []
    for i in range(count):
        task_rng = _rng(seeds[i])
        if kinds[i] == 0:
            ctx = int(rng.choice(ctx_lens))
            task = gen_needle(ctx, float(rng.random()), seeds[i])
            seq = full_sequence(task)
            sup = _mask_from(len(seq), np.arange(len(task.prompt_ids), len(seq)))
            out.append((seq, sup))
        elif kinds[i] == 1:
            n_pairs = int(rng.integers(n_pairs_range[0], n_pairs_range[1] + 1))
            out.append(_multi_query_recall(task_rng, n_pairs, head_first=rng.random() < 0.5))
        else:
            out.append(_copy_sequence(task_rng, int(rng.integers(12, 33))))
    return out


def make_soft_corpus(
    count: int,
    seed: int,
    ctx_lens=(48, 64, 96, 128),
    n_pairs_range=(2, 8),
    needle_frac: float = 0.5,
) -> list[np.ndarray]:
    """Corpus for probe training: sequences whose first 90% is a task prompt.

    Each task prompt is padded with its answer, EOS, and filler so that the
    standard 90% prefix cut recovers exactly the prompt; the model's own
    continuation from that prefix is then the retrieval behaviour the probes
    should imitate.
    """
    rng = _rng([seed, 3])
    seeds = derive_seeds(seed, count, salt=4)
    out = []
    for i in range(count):
        if rng.random() < needle_frac:
            ctx = int(rng.choice(ctx_lens))
            task = gen_needle(ctx, float(rng.random()), seeds[i])
        else:
            n_pairs = int(rng.integers(n_pairs_range[0], n_pairs_range[1] + 1))
            pos = "head" if rng.random() < 0.5 else "tail"
            task = gen_kv_recall(n_pairs, pos, seeds[i])
        plen = len(task.prompt_ids)
        total = int(np.ceil(plen / 0.9))
        pad = total - plen
        tail = np.concatenate([task.gold_ids, [EOS_ID]])[:pad]
        if len(tail) < pad:
            tail = np.concatenate([tail, rng.choice(FILL_SYMS, size=pad - len(tail))])
        seq = np.concatenate([task.prompt_ids, tail]).astype(np.int64)
        assert int(0.9 * len(seq)) == plen
        out.append(seq)
    return out


def make_eval_tasks(
    count: int,
    seed: int,
    kind: str = "needle",
    ctx_len: int = 128,
    n_pairs: int = 6,
    query_position: str = "tail",
) -> list[TaskInstance]:
    """Held-out task instances; pass a disjoint seed from training corpora."""
    seeds = derive_seeds(seed, count, salt=5)
    rng = _rng([seed, 6])
    tasks = []
    for i in range(count):
        if kind == "needle":
            tasks.append(gen_needle(ctx_len, float(rng.random()), seeds[i]))
        elif kind == "kv_recall":
            tasks.append(gen_kv_recall(n_pairs, query_position, seeds[i]))
        else:
            raise ValueError(f"unknown task kind: {kind}")
    return tasks
