"""Command-line pipeline: init (+ pre-train), corpus generation, probe
training, evaluation suites, and single-shot generation.

Configuration is a flat key=value text file; unknown keys are errors. All
randomness flows from the single `seed` key, and every run writes a
manifest (config hash, seed, versions) that suffices for bit-exact replay.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .experiments import (
    POLICIES,
    PolicyParams,
    fullkv_accuracy,
    grid_to_csv,
    results_to_csv,
    run_budget_sweep,
    run_degradation,
    run_hit_rate_study,
    run_needle_grid,
    run_soft_count_sweep,
    summary_to_json,
)
from .eviction import plan_to_csv
from .model import checksum_base, init_model, reset_soft_bank
from .experiments import TaskEval, _most_frequent_token
from .tasks import make_eval_tasks, make_pretrain_corpus, make_soft_corpus
from .tokenizer import byte_tokenize
from .trainer import (
    TrainConfig,
    dataset_stats,
    loss_curve_to_csv,
    make_dataset,
    train,
)


@dataclass
class RunConfig:
    # model
    vocab_size: int = 512
    n_soft: int = 32
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 32
    max_seq: int = 1024
    rope_theta: float = 10000.0
    mlp_hidden: int = 256
    # root seed
    seed: int = 0
    # base-model pre-training
    pretrain: bool = False
    pretrain_steps: int = 400
    pretrain_batch: int = 8
    pretrain_lr: float = 1e-3
    pretrain_corpus: int = 512
    # task shapes
    task_ctx: int = 128
    task_n_pairs: int = 6
    # probe training
    train_samples: int = 200
    train_epochs: int = 3
    train_batch: int = 32
    train_lr: float = 5e-5
    weight_decay: float = 0.01
    soft_init_noise: float = 0.02
    corpus_size: int = 256
    # eviction policy parameters
    window: int = 32
    pool: int = 7
    sinks: int = 4
    protect_judgeq: int = 0
    pyramid_floor: int = 0  # 0 means "use the protected window"
    kv_reduce: str = "mean"
    # evaluation
    budgets: str = "64,96"
    eval_tasks: int = 100
    policies: str = "full,stream,h2o,snapkv,pyramid,judgeq,oracle"
    depth_steps: int = 10
    grid_ctx: str = "64,96,128"
    soft_counts: str = "4,8,16,32"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size, n_soft=self.n_soft, d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads, n_kv_heads=self.n_kv_heads,
            head_dim=self.head_dim, max_seq=self.max_seq, rope_theta=self.rope_theta,
            mlp_hidden=self.mlp_hidden,
        )

    def policy_params(self) -> PolicyParams:
        return PolicyParams(
            window=self.window, pool=self.pool, sinks=self.sinks,
            protect_judgeq=self.protect_judgeq,
            pyramid_floor=self.pyramid_floor or None,
            kv_reduce=self.kv_reduce,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.train_lr, weight_decay=self.weight_decay,
            epochs=self.train_epochs, batch_size=self.train_batch, seed=self.seed,
        )

    def budget_list(self) -> list[int]:
        return [int(b) for b in self.budgets.split(",") if b.strip()]

    def policy_list(self) -> list[str]:
        names = [p.strip() for p in self.policies.split(",") if p.strip()]
        for p in names:
            if p not in POLICIES:
                raise ValueError(f"unknown policy: {p}")
        return names


def parse_config(path) -> RunConfig:
    """Strict flat key=value parser; '#' starts a comment."""
    known = {f.name: f.type for f in fields(RunConfig)}
    defaults = RunConfig()
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key '{key}'")
        current = getattr(defaults, key)
        if isinstance(current, bool):
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"{path}:{lineno}: bad boolean for '{key}'")
            values[key] = val.lower() in ("true", "1")
        elif isinstance(current, int):
            values[key] = int(val)
        elif isinstance(current, float):
            values[key] = float(val)
        else:
            values[key] = val
    return dataclasses.replace(defaults, **values)


def _config_hash(cfg: RunConfig) -> str:
    doc = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


def write_manifest(path, cfg: RunConfig, command: str, outputs: list[str]):
    manifest = {
        "command": command,
        "config": dataclasses.asdict(cfg),
        "config_hash": _config_hash(cfg),
        "seed": cfg.seed,
        "outputs": sorted(outputs),
        "versions": {
            "probekv": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_init(cfg: RunConfig, out: Path) -> int:
    weights = init_model(cfg.model_config(), seed=cfg.seed)
    if cfg.pretrain:
        from .pretrain import pretrain

        corpus = make_pretrain_corpus(
            cfg.pretrain_corpus, seed=cfg.seed,
            ctx_lens=tuple(sorted({max(48, cfg.task_ctx // 2), cfg.task_ctx})),
            n_pairs_range=(2, cfg.task_n_pairs),
        )
        history = pretrain(
            weights, corpus, steps=cfg.pretrain_steps, batch_size=cfg.pretrain_batch,
            lr=cfg.pretrain_lr, seed=cfg.seed,
        )
        print(f"pretrain: {len(history)} steps, final loss {history[-1]:.4f}")
        check = make_eval_tasks(32, seed=cfg.seed + 977, kind="needle", ctx_len=cfg.task_ctx)
        acc = fullkv_accuracy(weights, check)
        print(f"pretrain: FullKV needle accuracy {acc:.3f} on 32 smoke tasks")
    save_checkpoint(out, weights, extra_meta={"seed": cfg.seed, "pretrained": cfg.pretrain})
    reloaded, _ = load_checkpoint(out)
    for (n1, a1), (n2, a2) in zip(weights.named_tensors(), reloaded.named_tensors()):
        if n1 != n2 or not np.array_equal(a1, a2):
            print(f"checkpoint round-trip mismatch in {n1}", file=sys.stderr)
            return 1
    write_manifest(str(out) + ".manifest.json", cfg, "init", [str(out)])
    print(f"wrote {out}")
    return 0


def cmd_gen_corpus(cfg: RunConfig, out: Path) -> int:
    corpus = make_soft_corpus(
        cfg.corpus_size, seed=cfg.seed + 1,
        ctx_lens=tuple(sorted({max(48, cfg.task_ctx // 2), cfg.task_ctx})),
        n_pairs_range=(2, cfg.task_n_pairs),
    )
    np.savez(out, **{f"seq{i:05d}": s for i, s in enumerate(corpus)})
    write_manifest(str(out) + ".manifest.json", cfg, "gen-corpus", [str(out)])
    print(f"wrote {out} ({len(corpus)} sequences)")
    return 0


def _load_corpus(path) -> list[np.ndarray]:
    data = np.load(path)
    return [data[k] for k in sorted(data.files)]


def cmd_train_soft(cfg: RunConfig, checkpoint: Path, corpus_path: Path, out: Path) -> int:
    weights, _ = load_checkpoint(checkpoint)
    before = checksum_base(weights)
    corpus = _load_corpus(corpus_path)
    reset_soft_bank(
        weights, _most_frequent_token(corpus, weights.config.vocab_size),
        sigma=cfg.soft_init_noise, seed=cfg.seed,
    )
    dataset = make_dataset(weights, corpus, cfg.train_samples, seed=cfg.seed + 2)
    stats = dataset_stats(dataset)
    print(
        f"dataset: {stats['count']} samples, avg prompt {stats['avg_prompt_len']:.1f}, "
        f"avg response {stats['avg_response_len']:.2f}"
    )
    weights, history, skipped = train(weights, dataset, cfg.train_config())
    if skipped:
        print(f"warning: skipped {skipped} oversized samples")
    after = checksum_base(weights)
    if before != after:
        print("base weights changed during probe training", file=sys.stderr)
        return 1
    save_checkpoint(out, weights, extra_meta={"seed": cfg.seed, "soft_trained": True})
    loss_csv = Path(str(out) + ".loss.csv")
    loss_curve_to_csv(history, loss_csv)
    write_manifest(str(out) + ".manifest.json", cfg, "train-soft", [str(out), str(loss_csv)])
    print(
        f"trained probes: {len(history)} steps, loss {history[0].loss:.3e} -> {history[-1].loss:.3e}"
    )
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: Path, suite: str, out_dir: Path) -> int:
    weights, _ = load_checkpoint(checkpoint)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = cfg.policy_params()
    budgets = cfg.budget_list()
    policies = cfg.policy_list()
    outputs = []
    summary: dict = {"suite": suite}
    if suite == "budget":
        tasks = make_eval_tasks(cfg.eval_tasks, seed=cfg.seed + 3, kind="needle", ctx_len=cfg.task_ctx)
        results = run_budget_sweep(weights, tasks, policies, budgets, params)
        path = out_dir / "budget_sweep.csv"
        results_to_csv(results, path)
        outputs.append(str(path))
        summary["results"] = [dataclasses.asdict(r) for r in results]
    elif suite == "hitrate":
        tasks = make_eval_tasks(cfg.eval_tasks, seed=cfg.seed + 4, kind="needle", ctx_len=cfg.task_ctx)
        results = run_hit_rate_study(weights, tasks, budgets, policies, params)
        path = out_dir / "hit_rate.csv"
        results_to_csv(results, path)
        outputs.append(str(path))
        summary["results"] = [dataclasses.asdict(r) for r in results]
    elif suite == "degradation":
        report = run_degradation(
            weights, policies, budgets[0], cfg.eval_tasks, seed=cfg.seed + 5,
            n_pairs=cfg.task_n_pairs, params=params,
        )
        path = out_dir / "degradation.csv"
        with open(path, "w") as fh:
            fh.write("policy,head_score,tail_score,drop\n")
            for policy, row in report.items():
                drop = "" if row["drop"] is None else f"{row['drop']:.6f}"
                fh.write(f"{policy},{row['head']:.6f},{row['tail']:.6f},{drop}\n")
        outputs.append(str(path))
        summary["results"] = report
    elif suite == "needlegrid":
        ctx_lens = [int(c) for c in cfg.grid_ctx.split(",") if c.strip()]
        depths = [i / (cfg.depth_steps - 1) for i in range(cfg.depth_steps)]
        rows = run_needle_grid(
            weights, "judgeq", 0.5, ctx_lens, depths,
            n_per_cell=max(1, cfg.eval_tasks // (len(ctx_lens) * len(depths))),
            seed=cfg.seed + 6, params=params,
        )
        path = out_dir / "needle_grid.csv"
        grid_to_csv(rows, path)
        outputs.append(str(path))
        summary["results"] = rows
    elif suite == "softcount":
        corpus = make_soft_corpus(
            cfg.corpus_size, seed=cfg.seed + 1,
            ctx_lens=tuple(sorted({max(48, cfg.task_ctx // 2), cfg.task_ctx})),
            n_pairs_range=(2, cfg.task_n_pairs),
        )
        counts = [int(c) for c in cfg.soft_counts.split(",") if c.strip()]
        rows = run_soft_count_sweep(
            weights, corpus, counts, cfg.train_config(),
            dataset_size=cfg.train_samples, val_size=max(8, cfg.train_samples // 5),
            seed=cfg.seed + 7,
        )
        path = out_dir / "soft_count.csv"
        with open(path, "w") as fh:
            fh.write("count,trainable_params,val_loss,final_train_loss\n")
            for r in rows:
                fh.write(
                    f"{r['count']},{r['trainable_params']},{r['val_loss']:.6e},{r['final_train_loss']:.6e}\n"
                )
        outputs.append(str(path))
        summary["results"] = rows
    else:
        print(f"unknown suite: {suite}", file=sys.stderr)
        return 1
    summary_path = out_dir / "summary.json"
    summary_to_json(summary, summary_path)
    outputs.append(str(summary_path))
    write_manifest(out_dir / "manifest.json", cfg, f"eval:{suite}", outputs)
    print(f"wrote {len(outputs)} files to {out_dir}")
    return 0


def cmd_generate(
    cfg: RunConfig, checkpoint: Path, prompt_path: Path, policy: str, budget: int,
    max_new: int, out_dir: Path | None,
) -> int:
    weights, _ = load_checkpoint(checkpoint)
    if policy not in POLICIES:
        print(f"unknown policy: {policy}", file=sys.stderr)
        return 1
    seq = byte_tokenize(Path(prompt_path).read_bytes(), weights.config.vocab_size)
    from .tasks import TaskInstance

    task = TaskInstance(prompt_ids=seq.ids, gold_ids=np.zeros(0, dtype=np.int64), meta={})
    te = TaskEval(weights, task, cfg.policy_params())
    plan = te.plan_for(policy, budget)
    from .eviction import compact_cache
    from .engine import greedy_generate
    from .tokenizer import EOS_ID, byte_detokenize

    cache = compact_cache(te.base.cache, plan)
    out = greedy_generate(weights, cache, te.base.last_logits, max_new=max_new, stop_id=EOS_ID)
    kept = cache.rows_per_head()
    total = len(seq.ids)
    print(f"prompt tokens: {total}")
    for li in range(kept.shape[0]):
        print(f"layer {li}: kept per kv head {kept[li].tolist()} of {total}")
    print("generated ids:", out.tolist())
    text = byte_detokenize(out[out < 256], weights.config.vocab_size)
    print("generated text:", text.decode("utf-8", errors="replace"))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        plan_to_csv(plan, out_dir / "plan.csv")
        write_manifest(out_dir / "manifest.json", cfg, "generate", [str(out_dir / "plan.csv")])
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="probekv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="build (and optionally pre-train) a base model")
    p_init.add_argument("--config", required=True)
    p_init.add_argument("--out", required=True)
    p_init.add_argument("--seed", type=int, default=None)

    p_corpus = sub.add_parser("gen-corpus", help="write the synthetic probe-training corpus")
    p_corpus.add_argument("--config", required=True)
    p_corpus.add_argument("--out", required=True)
    p_corpus.add_argument("--seed", type=int, default=None)

    p_train = sub.add_parser("train-soft", help="train the probe bank on a corpus")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--checkpoint", required=True)
    p_train.add_argument("--corpus", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)

    p_eval = sub.add_parser("eval", help="run an evaluation suite")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--suite", required=True,
                        choices=["budget", "hitrate", "degradation", "needlegrid", "softcount"])
    p_eval.add_argument("--budget", type=int, default=None, help="override config budgets")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=None)

    p_gen = sub.add_parser("generate", help="prefill, evict, and decode one prompt")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--prompt", required=True)
    p_gen.add_argument("--policy", required=True, choices=list(POLICIES))
    p_gen.add_argument("--budget", type=int, required=True)
    p_gen.add_argument("--max-new", type=int, default=32)
    p_gen.add_argument("--out", default=None)
    p_gen.add_argument("--seed", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.command == "init":
            return cmd_init(cfg, Path(args.out))
        if args.command == "gen-corpus":
            return cmd_gen_corpus(cfg, Path(args.out))
        if args.command == "train-soft":
            return cmd_train_soft(cfg, Path(args.checkpoint), Path(args.corpus), Path(args.out))
        if args.command == "eval":
            if args.budget is not None:
                cfg = dataclasses.replace(cfg, budgets=str(args.budget))
            return cmd_eval(cfg, Path(args.checkpoint), args.suite, Path(args.out))
        if args.command == "generate":
            out_dir = Path(args.out) if args.out else None
            return cmd_generate(
                cfg, Path(args.checkpoint), Path(args.prompt), args.policy,
                args.budget, args.max_new, out_dir,
            )
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
