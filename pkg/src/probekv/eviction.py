"""Importance scoring, budget allocation, top-k selection, cache compaction.

Five scoring routes share one shape: a per-(layer, kv_head) score vector
over prompt positions. Query heads within a kv group are reduced (mean by
default) so selection happens at cache granularity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .engine import AttentionRecord, KVCache
from .sequences import ROLE_PROMPT, ROLE_RESPONSE, ROLE_SOFT, TokenSequence


@dataclass
class ImportanceScores:
    """values[layer, kv_head, position] >= 0 over prompt positions."""

    values: np.ndarray  # (n_layers, n_kv_heads, prompt_len)
    prompt_len: int
    policy: str = ""


@dataclass
class EvictionPlan:
    """Ascending kept-position arrays per (layer, kv_head)."""

    kept: list  # [layer][kv_head] -> (k,) int64, ascending
    budget: int
    prompt_len: int
    policy: str = ""

    @property
    def n_layers(self) -> int:
        return len(self.kept)

    @property
    def n_kv_heads(self) -> int:
        return len(self.kept[0])


@dataclass
class BudgetSchedule:
    per_layer: np.ndarray  # (n_layers,) int64
    nominal: int


def _reduce_groups(per_head: np.ndarray, n_kv_heads: int, reduce: str) -> np.ndarray:
    """(L, H, P) -> (L, G, P) by mean or max over each kv group."""
    L, H, P = per_head.shape
    grouped = per_head.reshape(L, n_kv_heads, H // n_kv_heads, P)
    if reduce == "mean":
        return grouped.mean(axis=2)
    if reduce == "max":
        return grouped.max(axis=2)
    raise ValueError("reduce must be 'mean' or 'max'")


def _role_rows(record: AttentionRecord, role: int) -> np.ndarray:
    return np.flatnonzero(record.roles == role)


def _prompt_len(record: AttentionRecord) -> int:
    return int((record.roles == ROLE_PROMPT).sum())


def _score_query_rows(
    record: AttentionRecord, rows: np.ndarray, n_kv_heads: int, reduce: str
) -> np.ndarray:
    p = _prompt_len(record)
    sliced = record.probs[:, :, rows, :p]  # (L, H, n_rows, P)
    per_head = sliced.mean(axis=2)
    return _reduce_groups(per_head, n_kv_heads, reduce)


def score_soft(
    record: AttentionRecord, seq: TokenSequence, n_kv_heads: int, reduce: str = "mean"
) -> ImportanceScores:
    """Mean attention of the probe rows onto prompt columns."""
    rows = _role_rows(record, ROLE_SOFT)
    if len(rows) == 0 or seq.soft_len == 0:
        raise ValueError("sequence has no soft block")
    vals = _score_query_rows(record, rows, n_kv_heads, reduce)
    return ImportanceScores(vals, _prompt_len(record), policy="judgeq")


def score_response(
    record: AttentionRecord, seq: TokenSequence, n_kv_heads: int, reduce: str = "mean"
) -> ImportanceScores:
    """Mean attention of the decoded-response rows onto prompt columns."""
    rows = _role_rows(record, ROLE_RESPONSE)
    if len(rows) == 0 or seq.response_len == 0:
        raise ValueError("sequence has no response block")
    vals = _score_query_rows(record, rows, n_kv_heads, reduce)
    return ImportanceScores(vals, _prompt_len(record), policy="oracle")


def _max_pool_same(scores: np.ndarray, pool: int) -> np.ndarray:
    """1-D max pool over the last axis, stride 1, same length, -inf padding."""
    if pool == 1:
        return scores
    pad = pool // 2
    padded = np.pad(
        scores, [(0, 0)] * (scores.ndim - 1) + [(pad, pad)],
        constant_values=-np.inf,
    )
    windows = np.lib.stride_tricks.sliding_window_view(padded, pool, axis=-1)
    return windows.max(axis=-1)


def score_snapkv(
    record: AttentionRecord,
    window: int = 32,
    pool: int = 7,
    n_kv_heads: int | None = None,
    reduce: str = "mean",
) -> ImportanceScores:
    """Summed last-window attention, max-pooled along the position axis.

    The last `window` prompt rows act as observers; their attention onto
    every prompt column is summed per head, pooled (kernel `pool`, stride 1,
    same padding), then reduced into kv groups.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if pool < 1 or pool % 2 == 0:
        raise ValueError("pool must be odd and >= 1")
    p = _prompt_len(record)
    w = min(window, p)
    if n_kv_heads is None:
        n_kv_heads = record.n_heads
    rows = np.arange(p - w, p)
    summed = record.probs[:, :, rows, :p].sum(axis=2)  # (L, H, P)
    pooled = _max_pool_same(summed, pool)
    vals = _reduce_groups(pooled, n_kv_heads, reduce)
    return ImportanceScores(vals, p, policy="snapkv")


def score_h2o(
    record: AttentionRecord,
    window: int = 32,
    n_kv_heads: int | None = None,
    reduce: str = "mean",
) -> ImportanceScores:
    """Cumulative last-window attention; snapkv scoring without pooling."""
    s = score_snapkv(record, window=window, pool=1, n_kv_heads=n_kv_heads, reduce=reduce)
    s.policy = "h2o"
    return s


def plan_streaming(
    prompt_len: int, budget: int, sinks: int, n_layers: int, n_kv_heads: int
) -> EvictionPlan:
    """Keep the first `sinks` positions plus the most recent tail; no scores."""
    if budget < sinks + 1:
        raise ValueError("budget must be at least sinks + 1")
    if budget >= prompt_len:
        kept_one = np.arange(prompt_len, dtype=np.int64)
    else:
        head = np.arange(sinks, dtype=np.int64)
        tail = np.arange(prompt_len - (budget - sinks), prompt_len, dtype=np.int64)
        kept_one = np.concatenate([head, tail])
    kept = [[kept_one.copy() for _ in range(n_kv_heads)] for _ in range(n_layers)]
    return EvictionPlan(kept=kept, budget=budget, prompt_len=prompt_len, policy="stream")


def uniform_schedule(nominal: int, n_layers: int) -> BudgetSchedule:
    return BudgetSchedule(np.full(n_layers, nominal, dtype=np.int64), nominal)


def allocate_pyramid(nominal: int, n_layers: int, floor: int) -> BudgetSchedule:
    """Arithmetic per-layer budgets, shallow-heavy, preserving the total.

    b_l = ceil(b_max - l*(b_max - floor)/(n_layers - 1)) with
    b_max = 2*nominal - floor; any ceil surplus is removed from the deepest
    layers first (never below `floor`) so the total is exactly
    nominal * n_layers.
    """
    if floor > nominal:
        raise ValueError("floor must be <= nominal")
    if floor < 1 or n_layers < 1:
        raise ValueError("floor and n_layers must be >= 1")
    if n_layers == 1:
        return BudgetSchedule(np.array([nominal], dtype=np.int64), nominal)
    b_max = 2 * nominal - floor
    step = (b_max - floor) / (n_layers - 1)
    sched = np.array(
        [int(np.ceil(b_max - l * step)) for l in range(n_layers)], dtype=np.int64
    )
    target = nominal * n_layers
    surplus = int(sched.sum()) - target
    li = n_layers - 1
    while surplus > 0:
        if sched[li] > floor:
            take = min(surplus, int(sched[li] - floor))
            sched[li] -= take
            surplus -= take
        li -= 1
        if li < 0 and surplus > 0:
            raise ValueError("cannot satisfy pyramid total within floor")
    return BudgetSchedule(sched, nominal)


def select_topk(
    scores: ImportanceScores, schedule: BudgetSchedule, protect_last: int = 0
) -> EvictionPlan:
    """Per-(layer, kv_head) top-k with a protected tail window.

    The last `protect_last` prompt positions are always kept; the rest of
    each layer's budget goes to the highest-scoring other positions, ties
    broken toward earlier positions. Output arrays are ascending.
    """
    L, G, p = scores.values.shape
    if len(schedule.per_layer) != L:
        raise ValueError("schedule length does not match score layers")
    if (schedule.per_layer < protect_last).any():
        raise ValueError("per-layer budget must be >= protect_last")
    kept = []
    idx = np.arange(p, dtype=np.int64)
    for li in range(L):
        budget = int(schedule.per_layer[li])
        layer_kept = []
        for g in range(G):
            if budget >= p:
                layer_kept.append(idx.copy())
                continue
            protected = idx[p - protect_last :] if protect_last > 0 else idx[:0]
            free = idx[: p - protect_last]
            order = np.lexsort((free, -scores.values[li, g, free]))
            chosen = free[order[: budget - protect_last]]
            layer_kept.append(np.sort(np.concatenate([chosen, protected])))
        kept.append(layer_kept)
    return EvictionPlan(
        kept=kept, budget=schedule.nominal, prompt_len=p, policy=scores.policy
    )


def full_plan(prompt_len: int, n_layers: int, n_kv_heads: int) -> EvictionPlan:
    """Identity plan: every prompt position kept (FullKV)."""
    idx = np.arange(prompt_len, dtype=np.int64)
    kept = [[idx.copy() for _ in range(n_kv_heads)] for _ in range(n_layers)]
    return EvictionPlan(kept=kept, budget=prompt_len, prompt_len=prompt_len, policy="full")


def compact_cache(cache: KVCache, plan: EvictionPlan) -> KVCache:
    """New cache holding exactly the planned prompt rows.

    Rows keep their original rotary-encoded keys and absolute positions.
    Probe and response rows are never in a plan, so they are dropped here;
    decoding resumes at the end of the original prompt.
    """
    if plan.n_layers != cache.n_layers or plan.n_kv_heads != cache.n_kv_heads:
        raise ValueError("plan structure does not match cache")
    keys, values, positions = [], [], []
    for li in range(cache.n_layers):
        lk, lv, lp = [], [], []
        for g in range(cache.n_kv_heads):
            cached_pos = cache.positions[li][g]
            want = plan.kept[li][g]
            row_of = np.searchsorted(cached_pos, want)
            if (row_of >= len(cached_pos)).any() or (cached_pos[np.minimum(row_of, len(cached_pos) - 1)] != want).any():
                raise ValueError("plan references a position missing from the cache")
            lk.append(cache.keys[li][g][row_of].copy())
            lv.append(cache.values[li][g][row_of].copy())
            lp.append(want.astype(np.int64).copy())
        keys.append(lk)
        values.append(lv)
        positions.append(lp)
    return KVCache(
        n_layers=cache.n_layers,
        n_kv_heads=cache.n_kv_heads,
        head_dim=cache.head_dim,
        keys=keys,
        values=values,
        positions=positions,
        next_position=plan.prompt_len,
    )


def hit_rate(plan_cur: EvictionPlan, plan_resp: EvictionPlan) -> float:
    """Mean over (layer, kv_head) of |kept_cur & kept_resp| / |kept_resp|."""
    if (
        plan_cur.n_layers != plan_resp.n_layers
        or plan_cur.n_kv_heads != plan_resp.n_kv_heads
        or plan_cur.prompt_len != plan_resp.prompt_len
    ):
        raise ValueError("plans have mismatched structure")
    rates = []
    for li in range(plan_cur.n_layers):
        for g in range(plan_cur.n_kv_heads):
            resp = plan_resp.kept[li][g]
            cur = plan_cur.kept[li][g]
            inter = np.intersect1d(cur, resp, assume_unique=True)
            rates.append(len(inter) / len(resp))
    return float(np.mean(rates))


def plan_to_csv(plan: EvictionPlan, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "kv_head", "kept_position"])
        for li in range(plan.n_layers):
            for g in range(plan.n_kv_heads):
                for pos in plan.kept[li][g]:
                    w.writerow([li, g, int(pos)])


def scores_to_csv(scores: ImportanceScores, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "kv_head", "position", "score"])
        L, G, p = scores.values.shape
        for li in range(L):
            for g in range(G):
                for pos in range(p):
                    w.writerow([li, g, pos, f"{scores.values[li, g, pos]:.6f}"])
