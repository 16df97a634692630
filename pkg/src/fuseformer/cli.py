"""Command-line entry point.

Subcommands: stats, synth, train-adapter, train-fusion, evaluate, grad-check,
count-params. Exit codes: 0 success, 2 input/config error, 3 numerical
divergence, 4 verification failure. Outputs are byte-identical across reruns
given identical inputs and seed; wall-clock timestamps live in a quarantined
"meta" field that determinism checks exclude.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (DEFAULT_CLASS_PRIORS, EMOTIONS, Splits, Vocabulary,
                   build_vocab, class_statistics, load_corpus, make_batches,
                   split_corpus, synth_corpus, write_corpus)
from .encoder import ModelConfig
from .errors import (CheckpointError, ConfigError, ContractError, CorpusError,
                     NumericalDivergenceError)
from .fusion import AdapterBank, count_parameters, group_of
from .losses import pos_weights
from .metrics import MetricsReport
from .tensor import finite_difference_check
from .training import (TaskSpec, TrainConfig, bank_from_checkpoint,
                       evaluate_model, group_hashes, load_checkpoint,
                       run_experiment, save_checkpoint, seeded, train_adapter,
                       train_fusion)

TASK_TABLE = {
    "sent2": ("binary", "mosei-style"),
    "sent7": ("multiclass-7", "mosei-style"),
    "emotion": ("multilabel-6", "mosei-style"),
    "binary-ext": ("binary", "binary-style"),
}

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_json(path: Path, body: dict) -> None:
    """Deterministic body under sorted keys; timestamp quarantined in meta."""
    payload = {"meta": {"created_at": _now()}, **body}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def _task_spec(name: str, loss: str) -> TaskSpec:
    kind, _ = TASK_TABLE[name]
    if kind == "multiclass-7":
        return TaskSpec(name=name, kind=kind, loss="ce")
    return TaskSpec(name=name, kind=kind, loss=loss)


def _load_task_corpus(path: str, task: str):
    _, schema = TASK_TABLE[task]
    return load_corpus(path, schema)


def _resolve_train_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.from_json_file(args.config)
    else:
        cfg = TrainConfig()
    overrides = {}
    for flag, field_name in (("runs", "runs"), ("seed", "seed"),
                             ("loss", "loss"), ("threshold", "threshold"),
                             ("warmup_steps", "warmup_steps"),
                             ("loss_reduction", "loss_reduction"),
                             ("epochs", "epochs"), ("batch_size", "batch_size"),
                             ("max_len", "max_len"), ("lr", "lr"),
                             ("patience", "patience")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    epochs = overrides.get("epochs", cfg.epochs)
    if "patience" not in overrides and cfg.patience > epochs:
        overrides["patience"] = epochs
    return replace(cfg, **overrides) if overrides else cfg


def _resolve_model_config(args) -> ModelConfig:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if "model" in raw:
            return ModelConfig.from_dict({**ModelConfig.desk().to_dict(),
                                          **raw["model"]})
    return ModelConfig.desk()


def _splits(args, task: str) -> Splits:
    corpus = _load_task_corpus(args.corpus, task)
    if not corpus:
        raise ConfigError(f"corpus {args.corpus} is empty")
    if args.val_corpus or args.test_corpus:
        if not (args.val_corpus and args.test_corpus):
            raise ConfigError("--val-corpus and --test-corpus go together")
        return Splits(train=corpus,
                      val=_load_task_corpus(args.val_corpus, task),
                      test=_load_task_corpus(args.test_corpus, task))
    return split_corpus(corpus)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_stats(args) -> int:
    corpus = _load_task_corpus(args.corpus, args.task)
    if not corpus:
        raise ConfigError(f"corpus {args.corpus} is empty")
    kind, _ = TASK_TABLE[args.task]
    stats = class_statistics(corpus, kind)
    weights = pos_weights(stats)
    rows = {}
    print(f"{'class':<12} {'positives':>9} {'negatives':>9} "
          f"{'proportion':>10} {'w_c':>10}")
    for i, label in enumerate(stats.labels):
        pos, neg = int(stats.positives[i]), int(stats.negatives[i])
        prop = pos / len(corpus)
        print(f"{label:<12} {pos:>9} {neg:>9} {prop:>10.4f} {weights.w[i]:>10.4f}")
        rows[label] = {"positives": pos, "negatives": neg,
                       "proportion": prop, "weight": float(weights.w[i])}
    if args.out:
        _write_json(Path(args.out) / "stats.json",
                    {"task": args.task, "size": len(corpus), "classes": rows})
    return EXIT_OK


def cmd_synth(args) -> int:
    priors = tuple(args.priors) if args.priors else DEFAULT_CLASS_PRIORS
    corpus = synth_corpus(args.seed, args.n, priors)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} examples to {args.out}")
    if args.vocab_out:
        build_vocab(corpus, args.vocab_size).save(args.vocab_out)
        print(f"wrote vocabulary to {args.vocab_out}")
    return EXIT_OK


def _report_body(report: MetricsReport, cfg: TrainConfig,
                 model_config: ModelConfig) -> dict:
    return {"report": report.to_dict(),
            "config": {"train": cfg.to_dict(), "model": model_config.to_dict()}}


def cmd_train_adapter(args) -> int:
    task = _task_spec(args.task, args.loss or "weighted_bce")
    cfg = _resolve_train_config(args)
    model_config = _resolve_model_config(args)
    splits = _splits(args, args.task)
    vocab = Vocabulary.load(args.vocab) if args.vocab else \
        build_vocab(splits.train, cfg.vocab_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}

    def run(seed: int):
        result = train_adapter(task, splits, model_config, seeded(cfg, seed),
                               vocab=vocab)
        results[seed] = result
        return result.test_report if result.test_report else result.val_report

    reports, aggregate = run_experiment(cfg, run)
    for seed, result in sorted(results.items()):
        save_checkpoint(result.checkpoint,
                        out / f"adapter-{task.name}-seed{seed}.ckpt")
        _write_json(out / f"report-{task.name}-seed{seed}.json",
                    {**_report_body(results[seed].test_report or
                                    results[seed].val_report, seeded(cfg, seed),
                                    model_config),
                     "history": results[seed].history,
                     "best_epoch": results[seed].best_epoch})
    base = results[cfg.seed]
    save_checkpoint(base.checkpoint, out / f"adapter-{task.name}.ckpt")
    _write_json(out / f"aggregate-{task.name}.json",
                {**_report_body(aggregate, cfg, model_config),
                 "runs": cfg.runs})
    print(aggregate.text_table())
    return EXIT_OK


def cmd_train_fusion(args) -> int:
    task = _task_spec(args.task, args.loss or "weighted_bce")
    cfg = _resolve_train_config(args)
    checkpoints = [load_checkpoint(p) for p in args.adapters]
    splits = _splits(args, args.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    frozen_before = {}
    for ckpt in checkpoints:
        for name, arr in ckpt.tensors.items():
            if group_of(name) in ("encoder",) or name.startswith("adapters."):
                frozen_before[name] = arr

    result = train_fusion(task, checkpoints, splits, cfg)
    audit = {}
    ok = True
    for group, names in result.bank.groups.groups.items():
        if group != "encoder" and not group.startswith("adapters."):
            continue
        before = hashlib.sha256(b"".join(
            np.asarray(frozen_before[n]).astype("<f4").tobytes()
            for n in sorted(names))).hexdigest()
        after = group_hashes(result.bank)[group]
        audit[group] = {"before": before, "after": after,
                        "frozen": before == after}
        ok = ok and before == after
    save_checkpoint(result.checkpoint, out / f"fusion-{task.name}.ckpt")
    model_config = result.bank.config
    _write_json(out / f"fusion-report-{task.name}.json",
                {**_report_body(result.test_report or result.val_report,
                                cfg, model_config),
                 "history": result.history, "audit": audit})
    print("FROZEN OK" if ok else "FROZEN VIOLATION")
    if result.test_report:
        print(result.test_report.text_table())
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bank, vocab, task = bank_from_checkpoint(ckpt)
    if args.task and args.task != task.name:
        raise ConfigError(
            f"checkpoint was trained for task {task.name!r}, not {args.task!r}")
    corpus = _load_task_corpus(args.corpus, task.name)
    if not corpus:
        raise ConfigError(f"corpus {args.corpus} is empty")
    cfg = TrainConfig.from_dict(ckpt.meta.get("train_config", {}))
    threshold = args.threshold if args.threshold is not None else cfg.threshold
    batches = make_batches(corpus, vocab, cfg.max_len, task.kind, cfg.batch_size)
    report = evaluate_model(bank, task, batches, threshold, split="eval",
                            seed=cfg.seed)
    print(report.text_table())
    if args.out:
        out = Path(args.out)
        _write_json(out / f"eval-{task.name}.json",
                    _report_body(report, cfg, bank.config))
        (out / f"eval-{task.name}.txt").write_text(report.text_table() + "\n",
                                                   encoding="utf-8")
    return EXIT_OK


GRAD_CHECK_BLOCKS = ("embeddings", "attention", "ff", "adapter", "fusion", "head")


def _block_of(name: str) -> str:
    if name.startswith("embeddings."):
        return "embeddings"
    if ".attention." in name:
        return "attention"
    if ".ff." in name:
        return "ff"
    if name.startswith("adapters."):
        return "adapter"
    if name.startswith("fusion."):
        return "fusion"
    return "head"


def cmd_grad_check(args) -> int:
    from .losses import weighted_bce, PosWeights
    from .data import Batch

    config = ModelConfig(num_layers=2, hidden_size=64, num_heads=4,
                         ff_size=256, vocab_size=24, max_positions=8)
    bank = AdapterBank(config, heads={"emotion": 6},
                       adapter_tasks=["sent2", "emotion"], with_fusion=True,
                       seed=args.seed)
    bank.attach("fusion", ["sent2", "emotion"])
    rng = np.random.default_rng(args.seed)
    b, l = 2, 6
    ids = rng.integers(4, config.vocab_size, size=(b, l))
    ids[:, 0] = 2
    mask = np.ones((b, l), dtype=np.int64)
    mask[0, l - 1] = 0
    labels = (rng.random((b, 6)) < 0.5).astype(np.float64)
    batch = Batch(token_ids=ids, attention_mask=mask,
                  segment_ids=np.zeros_like(ids), labels=labels)
    weights = PosWeights(w=np.array([0.92, 3.0, 3.76, 9.0, 4.88, 11.5]))

    def loss_fn():
        return weighted_bce(bank.forward(batch, "emotion"), labels, weights)

    transform = None
    if args.corrupt_grad:
        first = bank.params.names()[0]
        transform = lambda name, g: g * 1.5 if name == first else g  # noqa: E731

    report = finite_difference_check(
        loss_fn, bank.params.items(), h=args.h, tol=args.tol,
        max_coords_per_block=args.max_coords,
        rng=np.random.default_rng(args.seed + 1), grad_transform=transform)

    by_block: dict[str, list] = {blk: [] for blk in GRAD_CHECK_BLOCKS}
    for block in report.blocks:
        by_block[_block_of(block.name)].append(block)
    failed = []
    for blk in GRAD_CHECK_BLOCKS:
        checks = by_block[blk]
        worst = max(checks, key=lambda c: c.max_rel_err)
        status = "PASS" if worst.max_rel_err < args.tol else "FAIL"
        print(f"{blk:<12} {status}  max_rel_err={worst.max_rel_err:.3e}  "
              f"worst={worst.name}{list(worst.worst_index)}  "
              f"coords={sum(c.checked for c in checks)}")
        if status == "FAIL":
            failed.append((blk, worst))
    if args.out:
        _write_json(Path(args.out) / "grad-check.json",
                    {"tol": args.tol, "h": args.h,
                     "blocks": {blk: {
                         "max_rel_err": max(c.max_rel_err for c in by_block[blk]),
                         "passed": all(c.max_rel_err < args.tol
                                       for c in by_block[blk])}
                         for blk in GRAD_CHECK_BLOCKS}})
    if failed:
        print(f"gradient check failed for {len(failed)} block(s)",
              file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_count_params(args) -> int:
    config = ModelConfig.full_scale() if args.scale == "full" else ModelConfig.desk()
    if args.mode:
        counts = count_parameters(config, args.mode, num_tasks=args.num_tasks,
                                  num_labels=args.num_labels)
        print(json.dumps({"mode": args.mode, **counts}, sort_keys=True))
        return EXIT_OK
    rows = {
        "finetune": count_parameters(config, "finetune", num_labels=args.num_labels),
        "adapter": count_parameters(config, "adapter", num_labels=args.num_labels),
        "fusion3": count_parameters(config, "fusion", num_tasks=3,
                                    num_labels=args.num_labels),
        "fusion5": count_parameters(config, "fusion", num_tasks=5,
                                    num_labels=args.num_labels),
    }
    print(f"{'model':<10} {'total':>12} {'trainable':>12}")
    for name, row in rows.items():
        print(f"{name:<10} {row['total']:>12,} {row['trainable']:>12,}")
    if args.out:
        _write_json(Path(args.out) / "count-params.json",
                    {"scale": args.scale, "rows": rows})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fuseformer",
        description="Adapter-fusion emotion-recognition workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_train(p):
        p.add_argument("--config", help="JSON training config; flags override")
        p.add_argument("--corpus", required=True)
        p.add_argument("--val-corpus")
        p.add_argument("--test-corpus")
        p.add_argument("--vocab", help="shared vocabulary file")
        p.add_argument("--task", required=True, choices=sorted(TASK_TABLE))
        p.add_argument("--loss", choices=["bce", "weighted_bce", "focal"])
        p.add_argument("--runs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--max-len", dest="max_len", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--threshold", type=float)
        p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
        p.add_argument("--loss-reduction", dest="loss_reduction",
                       choices=["batch-mean", "sum"])
        p.add_argument("--out", required=True)

    p = sub.add_parser("stats", help="class statistics and positive weights")
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", required=True, choices=sorted(TASK_TABLE))
    p.add_argument("--out")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("synth", help="generate a synthetic imbalanced corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--priors", type=float, nargs=len(EMOTIONS))
    p.add_argument("--vocab-out", dest="vocab_out")
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=2000)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-adapter", help="stage 1: task adapter + head")
    common_train(p)
    p.set_defaults(fn=cmd_train_adapter)

    p = sub.add_parser("train-fusion", help="stage 2: fusion + target head")
    common_train(p)
    p.add_argument("--adapters", nargs="+", required=True,
                   help="stage-1 adapter checkpoints")
    p.set_defaults(fn=cmd_train_fusion)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", choices=sorted(TASK_TABLE))
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("grad-check",
                       help="finite-difference check of all parameter blocks")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", dest="max_coords", type=int, default=24)
    p.add_argument("--out")
    p.add_argument("--corrupt-grad", dest="corrupt_grad", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("count-params", help="exact parameter accounting")
    p.add_argument("--scale", choices=["desk", "full"], default="full")
    p.add_argument("--mode", choices=["finetune", "adapter", "fusion"])
    p.add_argument("--num-tasks", dest="num_tasks", type=int, default=3)
    p.add_argument("--num-labels", dest="num_labels", type=int, default=6)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_count_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericalDivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorpusError, ConfigError, CheckpointError, ContractError,
            OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
