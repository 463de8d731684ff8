"""Development-metric estimation, line scans and bootstrap significance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import RawExample, Schema
from .errors import ContractError, InputError
from .metrics import metric
from .model import Encoder
from .subspace import Baked, SubspaceModel, forward_baked, line_point, vertex_model
from .tokenizer import Batch, TokenSequence, Vocab, collate, tokenize

EVAL_STREAM = 1
INFER_BATCH = 64


@dataclass
class EvalConfig:
    mode: str = "stochastic"        # "stochastic" | "deterministic"
    n_concat: int = 10
    seed: int = 0
    aggregate: str = "pooled"       # "pooled" | "per_copy"

    def __post_init__(self) -> None:
        if self.mode not in ("stochastic", "deterministic"):
            raise InputError(f"unknown evaluation mode {self.mode!r}")
        if self.n_concat < 1:
            raise InputError("n_concat must be >= 1")
        if self.aggregate not in ("pooled", "per_copy"):
            raise InputError(f"unknown aggregate {self.aggregate!r}")


@dataclass
class EncodedSplit:
    """Tokenized examples with their labels; row ``i`` keys the sampling streams."""

    sequences: list[TokenSequence]
    labels: np.ndarray
    schema: Schema

    def __len__(self) -> int:
        return len(self.sequences)

    def batch(self, rows: Sequence[int]) -> Batch:
        return collate([self.sequences[i] for i in rows], rows=rows)

    def batches(self, size: int = INFER_BATCH):
        for start in range(0, len(self), size):
            yield self.batch(range(start, min(start + size, len(self))))


def encode_examples(examples: Sequence[RawExample], vocab: Vocab, schema: Schema,
                    max_seq_len: int) -> EncodedSplit:
    seqs = [tokenize(ex.text_a, ex.text_b if schema.pair else None, vocab, max_seq_len, label=ex.label)
            for ex in examples]
    dtype = np.float64 if schema.regression else np.int64
    return EncodedSplit(seqs, np.array([ex.label for ex in examples], dtype=dtype), schema)


def to_predictions(outputs: np.ndarray, regression: bool) -> np.ndarray:
    return outputs[:, 0].astype(np.float64) if regression else np.argmax(outputs, axis=1)


def _require_rows(split: EncodedSplit) -> None:
    if len(split) == 0:
        raise InputError("cannot evaluate an empty split")


def predict_baked(encoder: Encoder, baked: Baked, split: EncodedSplit) -> np.ndarray:
    _require_rows(split)
    outs = []
    with T.no_grad():
        for batch in split.batches():
            outs.append(forward_baked(encoder, baked, batch).data)
    return to_predictions(np.concatenate(outs), split.schema.regression)


def evaluate_baked(encoder: Encoder, baked: Baked, split: EncodedSplit, kind: str) -> float:
    return metric(kind, predict_baked(encoder, baked, split), split.labels)


def centroid_metric(model: SubspaceModel, split: EncodedSplit, kind: str) -> float:
    """Metric of the baked centroid (uniform weights) on ``split``."""
    return evaluate_baked(model.encoder, model.centroid(), split, kind)


def stochastic_predictions(model: SubspaceModel, split: EncodedSplit, config: EvalConfig) -> np.ndarray:
    """Predictions for ``n_concat`` copies of the split, one fresh simplex draw per observation.

    Returns shape (n_concat, len(split)).
    """
    _require_rows(split)
    copies = []
    with T.no_grad():
        for c in range(config.n_concat):
            outs = []
            for batch in split.batches():
                plan = model.draw_plan([(EVAL_STREAM, c, int(r)) for r in batch.rows], config.seed)
                outs.append(model.forward(batch, plan).data)
            copies.append(to_predictions(np.concatenate(outs), split.schema.regression))
    return np.stack(copies)


def stochastic_dev_metric(model: SubspaceModel, split: EncodedSplit, kind: str, config: EvalConfig) -> float:
    """Dev metric over the split concatenated ``n_concat`` times with per-observation sampling."""
    if config.mode != "stochastic":
        raise ContractError("stochastic_dev_metric called with a deterministic EvalConfig")
    preds = stochastic_predictions(model, split, config)
    if config.aggregate == "per_copy":
        return float(np.mean([metric(kind, p, split.labels) for p in preds]))
    return metric(kind, preds.reshape(-1), np.tile(split.labels, config.n_concat))


def dev_metric(model: SubspaceModel, split: EncodedSplit, kind: str, config: EvalConfig) -> float:
    if config.mode == "deterministic":
        return centroid_metric(model, split, kind)
    return stochastic_dev_metric(model, split, kind, config)


def line_scan(model: SubspaceModel, split: EncodedSplit, kind: str, num_points: int = 11) -> list[tuple[float, float]]:
    """Centroid-style metric at evenly spaced points ``alpha * v0 + (1 - alpha) * v1``."""
    if model.prefix.n != 2:
        raise ContractError(f"line_scan needs a 2-vertex prefix simplex, got n={model.prefix.n}")
    if num_points < 2:
        raise InputError("num_points must be >= 2")
    records = []
    for i in range(num_points):
        alpha = i / (num_points - 1)
        baked = line_point(model.prefix, model.heads, alpha)
        records.append((alpha, evaluate_baked(model.encoder, baked, split, kind)))
    return records


def vertex_metric(model: SubspaceModel, split: EncodedSplit, kind: str, i: int) -> float:
    return evaluate_baked(model.encoder, vertex_model(model.prefix, model.heads, i), split, kind)


def bootstrap_significance(scores_a: Sequence[float], scores_b: Sequence[float], resamples: int = 10_000,
                           level: float = 0.05, seed: int = 0) -> dict:
    """Paired bootstrap over per-replicate differences ``b - a``.

    Two-sided percentile p-value, ``2 * min(P(mean* <= 0), P(mean* >= 0))`` with
    the +1 correction, capped at 1.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError(f"paired score lists differ in length ({a.size} vs {b.size})")
    if a.size < 2:
        raise InputError("bootstrap needs at least 2 paired replicates")
    diff = b - a
    idx = np.random.default_rng(seed).integers(0, diff.size, size=(resamples, diff.size))
    means = diff[idx].mean(axis=1)
    tail = min(int(np.sum(means <= 0)), int(np.sum(means >= 0)))
    p = min(1.0, 2.0 * (tail + 1) / (resamples + 1))
    return {"significant": p < level, "p": p, "mean_difference": float(diff.mean())}
