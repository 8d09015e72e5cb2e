"""Experiment drivers: budget sweeps, hit-rate studies, question-position
degradation, needle grids, and probe-count sweeps.

Every driver is deterministic given (weights, task seeds, parameters), and
per-instance evaluation is exact-match: the decoded answer must equal the
gold ids token for token.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, replace

import numpy as np

from .engine import greedy_generate, prefill
from .eviction import (
    EvictionPlan,
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
from .model import Weights
from .sequences import prompt_sequence, with_response, with_soft_block
from .tasks import TaskInstance, gen_kv_recall, derive_seeds
from .tokenizer import EOS_ID

POLICIES = ("full", "stream", "h2o", "snapkv", "pyramid", "judgeq", "oracle")


@dataclass
class PolicyParams:
    """Knobs shared by the eviction policies.

    `window`/`pool` are the observation window and pooling kernel of the
    windowed baselines; those policies also protect their window. The probe
    and oracle policies protect nothing by default.
    """

    window: int = 32
    pool: int = 7
    sinks: int = 4
    protect_baseline: int | None = None  # defaults to window
    protect_judgeq: int = 0
    protect_oracle: int = 0
    pyramid_floor: int | None = None  # defaults to the protected window
    kv_reduce: str = "mean"
    response_max_new: int = 8

    @property
    def baseline_protect(self) -> int:
        return self.window if self.protect_baseline is None else self.protect_baseline


@dataclass
class EvalResult:
    policy: str
    budget: int
    task_kind: str
    score: float
    hit_rate: float
    n: int


class TaskEval:
    """Caches per-task prefills, the FullKV continuation, and policy scores
    so one instance can be swept across policies and budgets cheaply."""

    def __init__(self, weights: Weights, task: TaskInstance, params: PolicyParams):
        self.weights = weights
        self.task = task
        self.params = params
        cfg = weights.config
        self.prompt_len = len(task.prompt_ids)
        self.base = prefill(weights, prompt_sequence(task.prompt_ids), capture_attn=True)
        max_new = max(len(task.gold_ids) + 1, params.response_max_new)
        self.fullkv_out = greedy_generate(
            weights, self.base.cache.clone(), self.base.last_logits,
            max_new=max_new, stop_id=EOS_ID,
        )
        self._records = {}
        self._scores = {}
        self._plans = {}

    # -- records -------------------------------------------------------
    def record_for(self, policy: str):
        if policy in ("snapkv", "h2o", "pyramid", "stream", "full"):
            return self.base.record
        if policy == "judgeq":
            if "soft" not in self._records:
                cfg = self.weights.config
                seq = with_soft_block(self.task.prompt_ids, cfg.vocab_size, cfg.n_soft)
                self._records["soft"] = (
                    prefill(self.weights, seq, capture_attn=True).record, seq
                )
            return self._records["soft"]
        if policy == "oracle":
            if "resp" not in self._records:
                resp = self.fullkv_out
                seq = with_response(self.task.prompt_ids, resp)
                self._records["resp"] = (
                    prefill(self.weights, seq, capture_attn=True).record, seq
                )
            return self._records["resp"]
        raise ValueError(f"unknown policy: {policy}")

    def scores_for(self, policy: str):
        if policy in self._scores:
            return self._scores[policy]
        cfg = self.weights.config
        p = self.params
        if policy in ("snapkv", "pyramid"):
            s = score_snapkv(
                self.base.record, window=p.window, pool=p.pool,
                n_kv_heads=cfg.n_kv_heads, reduce=p.kv_reduce,
            )
        elif policy == "h2o":
            s = score_h2o(
                self.base.record, window=p.window,
                n_kv_heads=cfg.n_kv_heads, reduce=p.kv_reduce,
            )
        elif policy == "judgeq":
            record, seq = self.record_for("judgeq")
            s = score_soft(record, seq, cfg.n_kv_heads, reduce=p.kv_reduce)
        elif policy == "oracle":
            record, seq = self.record_for("oracle")
            s = score_response(record, seq, cfg.n_kv_heads, reduce=p.kv_reduce)
        else:
            raise ValueError(f"policy {policy} has no scores")
        self._scores[policy] = s
        return s

    def plan_for(self, policy: str, budget: int) -> EvictionPlan:
        key = (policy, budget)
        if key in self._plans:
            return self._plans[key]
        cfg = self.weights.config
        p = self.params
        if policy == "full":
            plan = full_plan(self.prompt_len, cfg.n_layers, cfg.n_kv_heads)
        elif policy == "stream":
            plan = plan_streaming(
                self.prompt_len, budget, p.sinks, cfg.n_layers, cfg.n_kv_heads
            )
        elif policy in ("snapkv", "h2o"):
            plan = select_topk(
                self.scores_for(policy), uniform_schedule(budget, cfg.n_layers),
                protect_last=p.baseline_protect,
            )
        elif policy == "pyramid":
            floor = p.pyramid_floor if p.pyramid_floor is not None else p.baseline_protect
            floor = max(1, min(floor, budget))
            sched = allocate_pyramid(budget, cfg.n_layers, floor)
            plan = select_topk(
                self.scores_for("pyramid"), sched, protect_last=p.baseline_protect
            )
            plan.policy = "pyramid"
        elif policy == "judgeq":
            plan = select_topk(
                self.scores_for(policy), uniform_schedule(budget, cfg.n_layers),
                protect_last=p.protect_judgeq,
            )
        elif policy == "oracle":
            plan = select_topk(
                self.scores_for(policy), uniform_schedule(budget, cfg.n_layers),
                protect_last=p.protect_oracle,
            )
        else:
            raise ValueError(f"unknown policy: {policy}")
        self._plans[key] = plan
        return plan

    def decode_with_plan(self, plan: EvictionPlan) -> np.ndarray:
        cache = compact_cache(self.base.cache, plan)
        return greedy_generate(
            self.weights, cache, self.base.last_logits,
            max_new=len(self.task.gold_ids), stop_id=EOS_ID,
        )

    def evaluate(self, policy: str, budget: int) -> tuple[int, float]:
        plan = self.plan_for(policy, budget)
        out = self.decode_with_plan(plan)
        correct = int(np.array_equal(out, self.task.gold_ids))
        oracle_plan = self.plan_for("oracle", budget)
        return correct, hit_rate(plan, oracle_plan)

    def fullkv_correct(self) -> int:
        out = self.fullkv_out[: len(self.task.gold_ids)]
        return int(np.array_equal(out, self.task.gold_ids))


def fullkv_accuracy(weights: Weights, tasks: list[TaskInstance]) -> float:
    """Exact-match accuracy with the untouched cache; no eviction involved."""
    hits = 0
    for t in tasks:
        res = prefill(weights, prompt_sequence(t.prompt_ids))
        out = greedy_generate(
            weights, res.cache, res.last_logits, max_new=len(t.gold_ids), stop_id=EOS_ID
        )
        hits += int(np.array_equal(out, t.gold_ids))
    return hits / len(tasks)


def run_budget_sweep(
    weights: Weights,
    tasks: list[TaskInstance],
    policies: list[str],
    budgets: list[int],
    params: PolicyParams | None = None,
) -> list[EvalResult]:
    """Score every (policy, budget) pair on every task; FullKV rows included."""
    params = params or PolicyParams()
    budgets = list(budgets)
    if budgets != sorted(budgets):
        raise ValueError("budgets must be ascending")
    acc: dict[tuple, list] = {}
    for task in tasks:
        te = TaskEval(weights, task, params)
        kind = task.meta.get("kind", "task")
        for policy in policies:
            for budget in budgets:
                correct, hr = te.evaluate(policy, budget)
                acc.setdefault((policy, budget, kind), []).append((correct, hr))
    results = []
    for policy in policies:
        for budget in budgets:
            for kind in sorted({k[2] for k in acc}):
                rows = acc.get((policy, budget, kind))
                if not rows:
                    continue
                scores = [r[0] for r in rows]
                hits = [r[1] for r in rows]
                results.append(
                    EvalResult(
                        policy=policy, budget=budget, task_kind=kind,
                        score=float(np.mean(scores)), hit_rate=float(np.mean(hits)),
                        n=len(rows),
                    )
                )
    return results


def run_hit_rate_study(
    weights: Weights,
    tasks: list[TaskInstance],
    budgets: list[int],
    policies: list[str],
    params: PolicyParams | None = None,
) -> list[EvalResult]:
    """Mean overlap with the response-oracle plan per policy and budget."""
    params = params or PolicyParams()
    acc: dict[tuple, list] = {}
    for task in tasks:
        te = TaskEval(weights, task, params)
        for budget in budgets:
            oracle_plan = te.plan_for("oracle", budget)
            for policy in policies:
                plan = te.plan_for(policy, budget)
                acc.setdefault((policy, budget), []).append(hit_rate(plan, oracle_plan))
    return [
        EvalResult(
            policy=policy, budget=budget, task_kind="hitrate",
            score=0.0, hit_rate=float(np.mean(vals)), n=len(vals),
        )
        for (policy, budget), vals in sorted(acc.items(), key=lambda kv: (kv[0][1], kv[0][0]))
    ]


def run_degradation(
    weights: Weights,
    policies: list[str],
    budget: int,
    n_tasks: int,
    seed: int,
    n_pairs: int = 6,
    params: PolicyParams | None = None,
) -> dict:
    """Relative score drop when the question moves from tail to head.

    drop = (tail_score - head_score) / tail_score on matched seeds; a policy
    with zero tail score is reported as undefined (None).
    """
    params = params or PolicyParams()
    seeds = derive_seeds(seed, n_tasks, salt=7)
    scores = {p: {"head": [], "tail": []} for p in policies}
    for s in seeds:
        for position in ("head", "tail"):
            task = gen_kv_recall(n_pairs, position, s)
            te = TaskEval(weights, task, params)
            for policy in policies:
                correct, _ = te.evaluate(policy, budget)
                scores[policy][position].append(correct)
    out = {}
    for policy in policies:
        head = float(np.mean(scores[policy]["head"]))
        tail = float(np.mean(scores[policy]["tail"]))
        drop = None if tail == 0.0 else (tail - head) / tail
        out[policy] = {"head": head, "tail": tail, "drop": drop}
    return out


def run_needle_grid(
    weights: Weights,
    policy: str,
    budget_frac: float,
    ctx_lens: list[int],
    depth_fracs: list[float],
    n_per_cell: int,
    seed: int,
    params: PolicyParams | None = None,
) -> list[dict]:
    """Retrieval accuracy over (context length, needle depth) cells."""
    from .tasks import gen_needle

    params = params or PolicyParams()
    rows = []
    for ctx_len in ctx_lens:
        for depth in depth_fracs:
            seeds = derive_seeds(seed, n_per_cell, salt=1000 + ctx_len * 101 + int(depth * 100))
            correct = []
            for s in seeds:
                task = gen_needle(ctx_len, depth, s)
                te = TaskEval(weights, task, params)
                budget = max(params.window, int(budget_frac * len(task.prompt_ids)))
                c, _ = te.evaluate(policy, budget)
                correct.append(c)
            rows.append(
                {"ctx_len": ctx_len, "depth_frac": depth, "score": float(np.mean(correct))}
            )
    return rows


def run_soft_count_sweep(
    base_weights: Weights,
    corpus: list[np.ndarray],
    counts: list[int],
    train_config,
    dataset_size: int,
    val_size: int,
    seed: int,
    eval_tasks: list[TaskInstance] | None = None,
    eval_budget_frac: float = 0.5,
    params: PolicyParams | None = None,
) -> list[dict]:
    """Train one probe bank per count on identical data; report validation
    loss and, optionally, downstream task accuracy."""
    from .model import Weights as W, reset_soft_bank
    from .trainer import loss_mse, attention_maps_pair, make_dataset, train

    params = params or PolicyParams()
    dataset = make_dataset(base_weights, corpus, dataset_size + val_size, seed=seed)
    train_set, val_set = dataset[:dataset_size], dataset[dataset_size:]
    mode_token = _most_frequent_token(corpus, base_weights.config.vocab_size)
    rows = []
    for count in counts:
        cfg = replace(base_weights.config, n_soft=count)
        emb = np.concatenate(
            [
                base_weights.embedding[: cfg.vocab_size].copy(),
                np.zeros((count, cfg.d_model), dtype=np.float32),
            ]
        )
        w = W(config=cfg, embedding=emb,
              layers=base_weights.layers, g_final=base_weights.g_final)
        reset_soft_bank(w, mode_token, sigma=0.02, seed=seed)
        w, history, _ = train(w, train_set, train_config)
        val_losses = []
        for s in val_set:
            a_soft, a_resp = attention_maps_pair(w, s)
            val_losses.append(loss_mse(a_soft, a_resp).loss)
        row = {
            "count": count,
            "trainable_params": int(count * cfg.d_model),
            "val_loss": float(np.mean(val_losses)),
            "final_train_loss": history[-1].loss if history else float("nan"),
        }
        if eval_tasks:
            accs = []
            for t in eval_tasks:
                te = TaskEval(w, t, params)
                budget = max(1, int(eval_budget_frac * len(t.prompt_ids)))
                c, _ = te.evaluate("judgeq", budget)
                accs.append(c)
            row["task_score"] = float(np.mean(accs))
        rows.append(row)
    return rows


def _most_frequent_token(corpus: list[np.ndarray], vocab_size: int) -> int:
    counts = np.zeros(vocab_size, dtype=np.int64)
    for seq in corpus:
        ids = seq[seq < vocab_size]
        counts += np.bincount(ids, minlength=vocab_size)
    return int(np.argmax(counts))


def results_to_csv(results: list[EvalResult], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "budget", "task", "score", "hit_rate", "n"])
        for r in results:
            w.writerow(
                [r.policy, r.budget, r.task_kind, f"{r.score:.6f}", f"{r.hit_rate:.6f}", r.n]
            )


def grid_to_csv(rows: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ctx_len", "depth_frac", "score"])
        for r in rows:
            w.writerow([r["ctx_len"], f"{r['depth_frac']:.2f}", f"{r['score']:.6f}"])


def summary_to_json(obj, path):
    def default(o):
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)
        raise TypeError(f"cannot serialize {type(o)}")

    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")
