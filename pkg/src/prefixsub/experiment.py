"""Run orchestration shared by the command line and the acceptance experiments.

Covers base-encoder checkpoints, prepared data directories, one fit per
(replicate, learning rate), learning-rate selection, run records and the
variant x K comparison table.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_container, read_header, save_container
from .data import FewShotSplit, Schema, SyntheticLanguage, load_corpus
from .errors import ContractError, InputError, RefusalError
from .evaluation import EncodedSplit, bootstrap_significance, encode_examples, evaluate_baked
from .metrics import metric_for_task
from .model import Encoder, ModelConfig, freeze_base, pretrain_toy
from .subspace import Baked, SubspaceModel
from .tokenizer import SPECIAL_TOKENS, Vocab, tokenize
from .trainer import TrainConfig, TrainState, build_model, fit

log = logging.getLogger(__name__)

SEED_ENV = "PREFIXSUB_SEED"
BASE_PREFIX = "base."
SIMPLEX_PREFIX = "simplex."
SUITES = {
    "full": {},
    "line": {"n_vertices": 2},
    "deterministic": {"dev_mode": "deterministic"},
    "head-only": {"subspace_scope": "head_only"},
    "prefix-only": {"subspace_scope": "prefix_only"},
    "prefix-tuning": {"n_vertices": 1, "dev_mode": "deterministic"},
}


# ---------------------------------------------------------------------------
# base encoder
# ---------------------------------------------------------------------------

def pretrain_base(texts: Sequence[str], config_overrides: dict | None = None, steps: int = 1500,
                  seed: int = 0, vocab: Vocab | None = None, lr: float = 1e-3) -> tuple[Encoder, Vocab, list[float]]:
    """Masked-token pretraining on ``texts``; returns the frozen encoder, its vocabulary and the losses."""
    vocab = vocab or Vocab.from_texts(texts)
    config = ModelConfig(vocab_size=len(vocab), **(config_overrides or {}))
    encoder = Encoder(config, seed=seed)
    corpus = [tokenize(t, None, vocab, config.max_seq_len) for t in texts]
    losses = pretrain_toy(encoder, corpus, steps=steps, seed=seed, lr=lr)
    freeze_base(encoder)
    return encoder, vocab, losses


def synthetic_base(vocab_words: int = 200, sentences: int = 2000, steps: int = 1500, seed: int = 0,
                   config_overrides: dict | None = None, lr: float = 1e-3) -> tuple[Encoder, Vocab, list[float]]:
    """Base encoder pretrained on the synthetic language used by the synthetic tasks."""
    lang = SyntheticLanguage(vocab_words, seed=seed)
    vocab = Vocab(list(SPECIAL_TOKENS) + lang.words)
    return pretrain_base(lang.corpus(sentences, seed=seed), config_overrides, steps, seed, vocab, lr)


def save_base(path, encoder: Encoder, vocab: Vocab, meta: dict | None = None) -> None:
    save_container(path, encoder.state_dict(), "base", encoder.config.to_dict(),
                   {"vocab": vocab.tokens, **(meta or {})})


def _encoder_from(config: dict, tensors: dict[str, np.ndarray], prefix: str = "") -> Encoder:
    encoder = Encoder(ModelConfig.from_dict(config), seed=0)
    encoder.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    freeze_base(encoder)
    return encoder


def load_base(path) -> tuple[Encoder, Vocab]:
    header, tensors = load_container(path)
    if header["kind"] != "base":
        raise InputError(f"{path}: expected a base checkpoint, found {header['kind']!r}")
    return _encoder_from(header["config"], tensors), Vocab(header["meta"]["vocab"])


# ---------------------------------------------------------------------------
# trained-model checkpoints (self-contained: base weights + vocab included)
# ---------------------------------------------------------------------------

@dataclass
class LoadedModel:
    kind: str                      # "baked" | "simplex"
    encoder: Encoder
    vocab: Vocab
    schema: Schema
    meta: dict
    baked: Baked | None = None
    model: SubspaceModel | None = None


def save_trained(path, kind: str, encoder: Encoder, vocab: Vocab, schema: Schema, model_config: ModelConfig,
                 meta: dict, baked: Baked | None = None, simplex_state: dict | None = None,
                 train_config: TrainConfig | None = None) -> None:
    tensors = {BASE_PREFIX + k: v for k, v in encoder.state_dict().items()}
    if kind == "baked":
        tensors.update(baked.arrays())
    else:
        tensors.update({SIMPLEX_PREFIX + k: v for k, v in simplex_state.items()})
    full_meta = {"vocab": vocab.tokens, "schema": str(schema), "base_config": encoder.config.to_dict(), **meta}
    if train_config is not None:
        full_meta["train_config"] = train_config.to_dict()
    save_container(path, tensors, kind, model_config.to_dict(), full_meta)


def load_trained(path) -> LoadedModel:
    header, tensors = load_container(path)
    kind = header["kind"]
    if kind not in ("baked", "simplex"):
        raise InputError(f"{path}: expected a trained model checkpoint, found {kind!r}")
    meta = header["meta"]
    encoder = _encoder_from(meta["base_config"], tensors, BASE_PREFIX)
    vocab = Vocab(meta["vocab"])
    schema = Schema.parse(meta["schema"])
    config = ModelConfig.from_dict(header["config"])
    loaded = LoadedModel(kind, encoder, vocab, schema, meta)
    if kind == "baked":
        loaded.baked = Baked.from_arrays(tensors, config.num_layers)
        return loaded
    train_config = TrainConfig.from_dict(meta["train_config"])
    model = build_model(encoder, train_config, schema)
    model.load_state_dict({k[len(SIMPLEX_PREFIX):]: v for k, v in tensors.items() if k.startswith(SIMPLEX_PREFIX)})
    loaded.model = model
    return loaded


def checkpoint_kind(path) -> str:
    return read_header(path)["kind"]


# ---------------------------------------------------------------------------
# prepared data directories
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def replicate_dir(data_dir, r: int) -> Path:
    return Path(data_dir) / f"replicate_{r}"


def load_prepared(data_dir) -> tuple[dict, Schema]:
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        raise InputError(f"no prepared splits in {data_dir} (missing {MANIFEST}); run `prepare` first")
    manifest = json.loads(path.read_text())
    return manifest, Schema.parse(manifest["schema"])


def load_prepared_split(data_dir, replicate: int) -> tuple[dict, Schema, FewShotSplit]:
    manifest, schema = load_prepared(data_dir)
    n = len(manifest["replicates"])
    if not 0 <= replicate < n:
        raise InputError(f"replicate {replicate} out of range: {data_dir} holds {n} replicates")
    rdir = replicate_dir(data_dir, replicate)
    split = FewShotSplit(task=manifest["task"], k=manifest["k"], replicate=replicate, seed=manifest["seed"],
                         train=load_corpus(rdir / "train.tsv", schema), val=load_corpus(rdir / "val.tsv", schema),
                         test=load_corpus(Path(data_dir) / "test.tsv", schema))
    return manifest, schema, split


def find_prepared(root) -> list[Path]:
    """Every prepared data directory at or below ``root`` (sorted)."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"data directory not found: {root}")
    found = sorted(p.parent for p in root.rglob(MANIFEST))
    if not found:
        raise InputError(f"no prepared splits under {root}; run `prepare` first")
    return found


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def config_hash(config: TrainConfig) -> str:
    raw = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(raw).hexdigest()[:16]


def apply_seed_override(config: TrainConfig) -> TrainConfig:
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return config
    try:
        return replace(config, seed=int(value))
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {value!r}") from None


@dataclass
class FitResult:
    config: TrainConfig
    state: TrainState

    @property
    def log_rows(self) -> list[tuple]:
        return [(self.config.learning_rate, r.epoch, r.train_loss, r.dev_metric, int(r.stopped))
                for r in self.state.history]


@dataclass
class RunResult:
    """The selected fit for one replicate plus its test score."""

    task: str
    k: int
    replicate: int
    metric: str
    best: FitResult
    fits: list[FitResult]
    test_metric: float
    model_config: ModelConfig

    def record(self, extra: dict | None = None) -> dict:
        st = self.best.state
        return {
            "task": self.task, "k": self.k, "replicate": self.replicate, "metric": self.metric,
            "dev_metric": st.best_metric, "test_metric": self.test_metric,
            "learning_rate": self.best.config.learning_rate, "best_epoch": st.best_epoch,
            "epochs_run": st.epoch, "fits": len(self.fits),
            "config_hash": config_hash(self.best.config), "seed": self.best.config.seed,
            **(extra or {}),
        }


def encode_split(split: FewShotSplit, vocab: Vocab, schema: Schema, max_seq_len: int):
    return tuple(encode_examples(x, vocab, schema, max_seq_len) for x in (split.train, split.val, split.test))


def fit_one(encoder: Encoder, train: EncodedSplit, val: EncodedSplit, config: TrainConfig, kind: str) -> FitResult:
    model = build_model(encoder, config, train.schema)
    return FitResult(config, fit(model, train, val, config, kind))


def select_best(fits: Sequence[FitResult]) -> FitResult:
    """Best dev metric; ties go to the lower learning rate (same rule as ``grid_search``)."""
    best = None
    for f in fits:
        if best is None or f.state.best_metric > best.state.best_metric or (
                f.state.best_metric == best.state.best_metric and f.config.learning_rate < best.config.learning_rate):
            best = f
    return best


def run_replicate(encoder: Encoder, vocab: Vocab, split: FewShotSplit, schema: Schema, config: TrainConfig,
                  metric: str | None = None) -> RunResult:
    """Grid search over ``config.learning_rates`` for one replicate, then score the chosen centroid on test."""
    if not config.learning_rates:
        raise InputError("config.learning_rates must list at least one learning rate")
    kind = metric or metric_for_task(split.task, schema.regression)
    train, val, test = encode_split(split, vocab, schema, encoder.config.max_seq_len)
    fits = []
    for lr in config.learning_rates:
        cfg = replace(config, learning_rate=float(lr))
        log.info("%s K=%d replicate %d lr=%g", split.task, split.k, split.replicate, lr)
        fits.append(fit_one(encoder, train, val, cfg, kind))
    best = select_best(fits)
    test_metric = evaluate_baked(encoder, best.state.best_model, test, kind)
    model_cfg = build_model(encoder, best.config, schema).config
    return RunResult(split.task, split.k, split.replicate, kind, best, fits, test_metric, model_cfg)


def run_dir(out, task: str, k: int, replicate: int) -> Path:
    return Path(out) / task / str(k) / str(replicate)


RUN_FILES = ("model.ckpt", "simplex.ckpt", "train.log", "result.json")


def check_overwrite(path: Path, force: bool) -> None:
    existing = [path / f for f in RUN_FILES if (path / f).exists()]
    if existing and not force:
        raise RefusalError(f"{path} already holds run artifacts ({existing[0].name}); pass --force to overwrite")


def write_run(out_dir: Path, result: RunResult, encoder: Encoder, vocab: Vocab, schema: Schema,
              extra: dict | None = None) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    best = result.best
    meta = {"task": result.task, "k": result.k, "replicate": result.replicate, "metric": result.metric}
    save_trained(out_dir / "model.ckpt", "baked", encoder, vocab, schema, result.model_config, meta,
                 baked=best.state.best_model, train_config=best.config)
    save_trained(out_dir / "simplex.ckpt", "simplex", encoder, vocab, schema, result.model_config, meta,
                 simplex_state=best.state.best_simplex, train_config=best.config)
    with open(out_dir / "train.log", "w", encoding="utf-8") as fh:
        fh.write("learning_rate\tepoch\ttrain_loss\tdev_metric\tstopped\n")
        for f in result.fits:
            for row in f.log_rows:
                fh.write("{:g}\t{}\t{:.6f}\t{:.6f}\t{}\n".format(*row))
    record = result.record(extra)
    (out_dir / "result.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


# ---------------------------------------------------------------------------
# parallel sweeps
# ---------------------------------------------------------------------------

@dataclass
class Job:
    base: str
    data_dir: str
    replicate: int
    config: TrainConfig
    metric: str | None = None


def _job_run(job: Job) -> RunResult:
    encoder, vocab = load_base(job.base)
    _, schema, split = load_prepared_split(job.data_dir, job.replicate)
    return run_replicate(encoder, vocab, split, schema, job.config, job.metric)


def run_jobs(jobs: Sequence[Job], workers: int = 1) -> list[RunResult]:
    """Run replicate jobs in isolated worker processes (in-process when ``workers == 1``)."""
    if workers < 1:
        raise InputError("workers must be >= 1")
    if workers == 1 or len(jobs) <= 1:
        return [_job_run(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job_run, jobs))


# ---------------------------------------------------------------------------
# comparison tables
# ---------------------------------------------------------------------------

def collect_results(root) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted(Path(root).rglob("result.json"))]


def comparison_table(records_by_variant: dict[str, list[dict]], reference: str = "full",
                     resamples: int = 10_000) -> dict:
    """Mean test metric per (variant, task, K) and paired bootstrap p-values against ``reference``."""
    ks = sorted({r["k"] for recs in records_by_variant.values() for r in recs})
    rows = []
    for variant in sorted(records_by_variant, key=lambda v: (v != reference, v)):
        recs = records_by_variant[variant]
        row = {"variant": variant, "mean": {}, "p": {}, "replicates": {}}
        for k in ks:
            at_k = {(r["task"], r["replicate"]): r["test_metric"] for r in recs if r["k"] == k}
            if not at_k:
                continue
            row["mean"][k] = float(np.mean(list(at_k.values())))
            row["replicates"][k] = len(at_k)
            ref = {(r["task"], r["replicate"]): r["test_metric"]
                   for r in records_by_variant.get(reference, []) if r["k"] == k}
            shared = sorted(set(at_k) & set(ref))
            if variant != reference and len(shared) >= 2:
                out = bootstrap_significance([ref[s] for s in shared], [at_k[s] for s in shared], resamples)
                row["p"][k] = out["p"]
        rows.append(row)
    return {"reference": reference, "ks": ks, "rows": rows}


def format_table(table: dict) -> str:
    """TSV with one row per variant and one column per K (mean test metric), plus p-value columns."""
    ks = table["ks"]
    header = ["variant"] + [f"K={k}" for k in ks] + [f"p(K={k})" for k in ks]
    lines = ["\t".join(header)]
    for row in table["rows"]:
        cells = [row["variant"]]
        cells += [f"{row['mean'][k]:.4f}" if k in row["mean"] else "" for k in ks]
        cells += [f"{row['p'][k]:.4f}" if k in row["p"] else "" for k in ks]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def require_line(loaded: LoadedModel) -> SubspaceModel:
    if loaded.kind != "simplex":
        raise ContractError("a line scan needs a simplex checkpoint (simplex.ckpt), not a baked model")
    if loaded.model.prefix.n != 2:
        raise ContractError(f"a line scan needs a 2-vertex simplex, checkpoint has n={loaded.model.prefix.n}")
    return loaded.model
