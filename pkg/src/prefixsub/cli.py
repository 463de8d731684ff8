"""Command-line entry point: ``prefixsub <command> ...``.

Exit codes: 0 success, 1 internal error, 2 input error, 3 refusal to overwrite.
Logs go to standard error; data and results go to files (``eval`` prints its
metric on standard output).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as X
from .data import (TASK_KINDS, TASK_SCHEMAS, Schema, build_fewshot_splits, generate_synthetic_task, load_corpus,
                   split_manifest, write_tsv)
from .errors import ContractError, InputError, RefusalError, ShapeError
from .evaluation import EvalConfig, centroid_metric, encode_examples, evaluate_baked, line_scan, stochastic_dev_metric
from .metrics import METRIC_KINDS
from .trainer import TrainConfig

log = logging.getLogger("prefixsub")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_REFUSED = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _refuse_if_exists(paths, force: bool) -> None:
    for p in paths:
        if Path(p).exists() and not force:
            raise RefusalError(f"{p} already exists; pass --force to overwrite")


def load_train_config(path) -> tuple[TrainConfig, dict]:
    """Read a JSON training config; unspecified fields take TrainConfig defaults.

    Extra keys ``base`` (base checkpoint path, relative to the config file)
    and ``metric`` are returned separately.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise InputError(f"{path}: expected a JSON object")
    extras = {k: raw.pop(k) for k in ("base", "metric") if k in raw}
    if "base" in extras:
        base = Path(extras["base"])
        extras["base"] = str(base if base.is_absolute() else path.parent / base)
    try:
        config = TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise InputError(f"{path}: {exc}") from None
    return X.apply_seed_override(config), extras


def _resolve_base(args, extras: dict) -> str:
    base = args.base or extras.get("base")
    if not base:
        raise InputError("no base checkpoint: pass --base or set \"base\" in the config")
    if not Path(base).is_file():
        raise InputError(f"base checkpoint not found: {base}")
    return str(base)


def _metric_arg(value: str | None) -> str | None:
    if value is not None and value not in METRIC_KINDS:
        raise InputError(f"unknown metric {value!r}; choose from {', '.join(METRIC_KINDS)}")
    return value


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    out = Path(args.out)
    _refuse_if_exists([out / X.MANIFEST], args.force)
    if args.synthetic:
        schema = TASK_SCHEMAS[args.synthetic]
        corpus = generate_synthetic_task(args.synthetic, args.size, vocab_size=args.vocab_size, noise=args.noise,
                                         seed=args.data_seed)
        task, source = args.task or args.synthetic, f"synthetic:{args.synthetic}:{args.size}:{args.data_seed}"
    else:
        if not args.schema:
            raise InputError("--schema is required with --input")
        schema = Schema.parse(args.schema)
        corpus = load_corpus(args.input, schema)
        task, source = args.task or Path(args.input).stem, str(args.input)
    splits = build_fewshot_splits(corpus, args.k, args.replicates, args.seed, task=task)
    out.mkdir(parents=True, exist_ok=True)
    write_tsv(out / "test.tsv", splits[0].test, schema)
    for s in splits:
        rdir = X.replicate_dir(out, s.replicate)
        rdir.mkdir(exist_ok=True)
        write_tsv(rdir / "train.tsv", s.train, schema)
        write_tsv(rdir / "val.tsv", s.val, schema)
    manifest = split_manifest(splits, schema, source)
    (out / X.MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    log.info("prepared %s: K=%d, %d replicates, test=%d rows -> %s", task, args.k, len(splits),
             len(splits[0].test), out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    _refuse_if_exists([out], args.force)
    overrides = dict(num_layers=args.layers, d_model=args.d_model, num_heads=args.heads, d_ff=args.d_ff,
                     max_seq_len=args.max_seq_len)
    if args.corpus:
        path = Path(args.corpus)
        if not path.is_file():
            raise InputError(f"corpus file not found: {path}")
        texts = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        encoder, vocab, losses = X.pretrain_base(texts, overrides, args.steps, args.seed, lr=args.lr)
    else:
        encoder, vocab, losses = X.synthetic_base(args.vocab_size, args.sentences, args.steps, args.seed,
                                                  overrides, lr=args.lr)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"steps": args.steps, "seed": args.seed}
    if losses:
        meta.update(first_loss=losses[0], final_loss=float(np.mean(losses[-50:])))
        log.info("pretraining loss %.4f -> %.4f over %d steps", losses[0], meta["final_loss"], len(losses))
    X.save_base(out, encoder, vocab, meta)
    log.info("wrote base checkpoint %s", out)
    return EXIT_OK


def _train_one(base: str, data_dir, replicate: int, config: TrainConfig, metric: str | None, out, force: bool,
               extra: dict | None = None) -> dict:
    manifest, _ = X.load_prepared(data_dir)
    target = X.run_dir(out, manifest["task"], manifest["k"], replicate)
    X.check_overwrite(target, force)
    encoder, vocab = X.load_base(base)
    _, schema, split = X.load_prepared_split(data_dir, replicate)
    result = X.run_replicate(encoder, vocab, split, schema, config, metric)
    record = X.write_run(target, result, encoder, vocab, schema, extra)
    log.info("%s K=%d replicate %d: dev %.4f test %.4f (lr %g) -> %s", record["task"], record["k"], replicate,
             record["dev_metric"], record["test_metric"], record["learning_rate"], target)
    return record


def cmd_train(args) -> int:
    config, extras = load_train_config(args.config)
    base = _resolve_base(args, extras)
    _train_one(base, args.data, args.replicate, config, _metric_arg(extras.get("metric")), args.out, args.force)
    return EXIT_OK


def _run_many(base: str, data_root, config: TrainConfig, metric: str | None, out, force: bool, workers: int,
              extra: dict | None = None) -> list[dict]:
    jobs, targets = [], []
    for data_dir in X.find_prepared(data_root):
        manifest, _ = X.load_prepared(data_dir)
        for r in range(len(manifest["replicates"])):
            target = X.run_dir(out, manifest["task"], manifest["k"], r)
            X.check_overwrite(target, force)
            jobs.append(X.Job(base, str(data_dir), r, config, metric))
            targets.append(target)
    log.info("running %d replicate jobs (%d learning rates each) on %d worker(s)", len(jobs),
             len(config.learning_rates), workers)
    results = X.run_jobs(jobs, workers)
    encoder, vocab = X.load_base(base)
    records = []
    for job, target, result in zip(jobs, targets, results):
        _, schema = X.load_prepared(job.data_dir)
        records.append(X.write_run(target, result, encoder, vocab, schema, extra))
    return records


def _summary_tsv(records: list[dict]) -> str:
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((r["task"], r["k"], r["metric"]), []).append(r["test_metric"])
    lines = ["task\tk\tmetric\treplicates\tmean_test\tstd_test"]
    for (task, k, metric), values in sorted(groups.items()):
        lines.append(f"{task}\t{k}\t{metric}\t{len(values)}\t{np.mean(values):.4f}\t{np.std(values):.4f}")
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    config, extras = load_train_config(args.config)
    base = _resolve_base(args, extras)
    records = _run_many(base, args.data, config, _metric_arg(extras.get("metric")), args.out, args.force,
                        args.workers)
    Path(args.out, "summary.tsv").write_text(_summary_tsv(records))
    log.info("sweep finished: %d runs, summary in %s", len(records), Path(args.out, "summary.tsv"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.config:
        config, extras = load_train_config(args.config)
    else:
        config, extras = X.apply_seed_override(TrainConfig()), {}
    base = _resolve_base(args, extras)
    config = replace(config, **X.SUITES[args.suite])
    out = Path(args.out)
    _run_many(base, args.data, config, _metric_arg(extras.get("metric")), out / args.suite, args.force,
              args.workers, extra={"variant": args.suite})
    by_variant = {}
    for suite in X.SUITES:
        records = X.collect_results(out / suite) if (out / suite).is_dir() else []
        if records:
            by_variant[suite] = records
    table = X.comparison_table(by_variant)
    (out / "ablation.tsv").write_text(X.format_table(table))
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    log.info("ablation table (%d variants) written to %s", len(table["rows"]), out / "ablation.tsv")
    return EXIT_OK


def _load_split_for(loaded: X.LoadedModel, path):
    try:
        examples = load_corpus(path, loaded.schema)
    except InputError as exc:
        raise InputError(f"split does not match the checkpoint schema {loaded.schema}: {exc}") from None
    return encode_examples(examples, loaded.vocab, loaded.schema, loaded.encoder.config.max_seq_len)


def evaluate_checkpoint(model_path, split_path, metric: str, stochastic: bool = False, n_concat: int = 10,
                        seed: int = 0) -> float:
    loaded = X.load_trained(model_path)
    split = _load_split_for(loaded, split_path)
    if stochastic:
        if loaded.kind != "simplex":
            raise ContractError("--stochastic needs a simplex checkpoint (simplex.ckpt); a baked model has "
                                "no simplex to sample from")
        return stochastic_dev_metric(loaded.model, split, metric, EvalConfig(n_concat=n_concat, seed=seed))
    if loaded.kind == "baked":
        return evaluate_baked(loaded.encoder, loaded.baked, split, metric)
    return centroid_metric(loaded.model, split, metric)


def cmd_eval(args) -> int:
    value = evaluate_checkpoint(args.model, args.split, _metric_arg(args.metric), args.stochastic, args.n_concat,
                                args.seed)
    print(repr(float(value)))
    return EXIT_OK


def cmd_scan(args) -> int:
    out = Path(args.out)
    summary_path = out.with_suffix(".json")
    _refuse_if_exists([out, summary_path], args.force)
    loaded = X.load_trained(args.model_line)
    model = X.require_line(loaded)
    metric = _metric_arg(args.metric) or loaded.meta.get("metric")
    if metric is None:
        raise InputError("checkpoint records no metric; pass --metric")
    split = _load_split_for(loaded, args.split)
    records = line_scan(model, split, metric, args.points)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("alpha\tmetric\n")
        for alpha, value in records:
            fh.write(f"{alpha!r}\t{value!r}\n")
    summary = {"task": loaded.meta.get("task"), "k": loaded.meta.get("k"), "replicate": loaded.meta.get("replicate"),
               "metric": metric, "points": args.points, "split": str(args.split), "model": str(args.model_line),
               "seed": loaded.meta.get("train_config", {}).get("seed"), "config": loaded.meta.get("train_config")}
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d scan points to %s", len(records), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefixsub", description="Subspace training of prefix-tuning parameters.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build few-shot train/val/test splits")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="TSV (with header) or JSONL corpus")
    src.add_argument("--synthetic", choices=TASK_KINDS, help="generate a synthetic corpus instead")
    p.add_argument("--schema", help="e.g. single:class:2, pair:class:2, pair:reg (required with --input)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--task", help="task name (defaults to the input stem or synthetic kind)")
    p.add_argument("--size", type=int, default=1000, help="synthetic corpus size")
    p.add_argument("--noise", type=float, default=0.0, help="synthetic label noise")
    p.add_argument("--vocab-size", type=int, default=200, help="synthetic vocabulary size")
    p.add_argument("--data-seed", type=int, default=0, help="synthetic generator seed")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="masked-token pretraining of the base encoder")
    p.add_argument("--out", required=True, help="base checkpoint path")
    p.add_argument("--corpus", help="plain-text corpus, one sentence per line (default: synthetic language)")
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--sentences", type=int, default=2000)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="grid search + fit for one replicate")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="prepared data directory")
    p.add_argument("--replicate", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base", help="base checkpoint (overrides the config's \"base\")")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split file")
    p.add_argument("--model", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--metric", required=True, choices=METRIC_KINDS)
    p.add_argument("--stochastic", action="store_true", help="sample simplex members per observation")
    p.add_argument("--n-concat", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation variant over prepared data and rebuild the table")
    p.add_argument("--suite", required=True, choices=sorted(X.SUITES))
    p.add_argument("--data", required=True, help="prepared data directory (searched recursively)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="base training config (defaults to TrainConfig defaults)")
    p.add_argument("--base", help="base checkpoint")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("scan", help="metric along a trained 2-vertex line")
    p.add_argument("--model-line", required=True, help="simplex checkpoint of a 2-vertex run")
    p.add_argument("--split", required=True)
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--out", required=True, help="TSV output; a JSON summary is written next to it")
    p.add_argument("--metric", choices=METRIC_KINDS, help="defaults to the metric recorded in the checkpoint")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("sweep", help="all replicates x learning rates over a worker pool")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="prepared data directory (searched recursively)")
    p.add_argument("--out", required=True)
    p.add_argument("--base", help="base checkpoint")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except RefusalError as exc:
        log.error("%s", exc)
        return EXIT_REFUSED
    except (InputError, ContractError, ShapeError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
