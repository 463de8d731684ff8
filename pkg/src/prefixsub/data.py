"""Corpus files, few-shot split construction and synthetic desk-scale tasks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

TEST_CAP = 5000
TRAIN_FRACTION = 0.7


@dataclass(frozen=True)
class RawExample:
    text_a: str
    text_b: str | None
    label: float | int


@dataclass(frozen=True)
class Schema:
    """Input layout (single sentence or pair) and label type."""

    pair: bool
    num_classes: int | None  # None means regression

    @property
    def regression(self) -> bool:
        return self.num_classes is None

    @classmethod
    def parse(cls, text: str) -> "Schema":
        """Parse ``single:class:2``, ``pair:class:3``, ``pair:reg`` and the like."""
        norm = text.strip().lower()
        for layout in ("singlex", "pairx"):
            if norm.startswith(layout):
                norm = layout[:-1] + ":" + norm[len(layout):]
        parts = [p for p in norm.split(":") if p]
        if len(parts) < 2 or parts[0] not in ("single", "pair"):
            raise InputError(f"bad schema {text!r}; expected e.g. 'single:class:2' or 'pair:reg'")
        pair = parts[0] == "pair"
        if parts[1] in ("reg", "regression") and len(parts) == 2:
            return cls(pair, None)
        if parts[1] in ("class", "classification") and len(parts) == 3 and parts[2].isdigit() and int(parts[2]) >= 2:
            return cls(pair, int(parts[2]))
        raise InputError(f"bad schema {text!r}; expected e.g. 'single:class:2' or 'pair:reg'")

    def __str__(self) -> str:
        layout = "pair" if self.pair else "single"
        return f"{layout}:reg" if self.regression else f"{layout}:class:{self.num_classes}"

    def parse_label(self, raw, where: str):
        if self.regression:
            try:
                value = float(raw)
            except (TypeError, ValueError):
                raise InputError(f"{where}: regression label {raw!r} is not a number") from None
            if not math.isfinite(value):
                raise InputError(f"{where}: regression label must be finite")
            return value
        try:
            value = int(raw)
        except (TypeError, ValueError):
            raise InputError(f"{where}: class label {raw!r} is not an integer") from None
        if isinstance(raw, float) and raw != value:
            raise InputError(f"{where}: class label {raw!r} is not an integer")
        if not 0 <= value < self.num_classes:
            raise InputError(f"{where}: label {value} out of range [0, {self.num_classes})")
        return value


def _example_from_fields(schema: Schema, text_a, text_b, label, where: str) -> RawExample:
    if not isinstance(text_a, str) or not text_a.strip():
        raise InputError(f"{where}: missing text_a")
    if schema.pair:
        if not isinstance(text_b, str) or not text_b.strip():
            raise InputError(f"{where}: pair schema requires text_b")
    else:
        text_b = None
    return RawExample(text_a, text_b, schema.parse_label(label, where))


def load_corpus(path, schema: Schema) -> list[RawExample]:
    """Read a TSV (with header) or newline-delimited JSON corpus."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input file not found: {path}")
    examples: list[RawExample] = []
    if path.suffix.lower() in (".jsonl", ".json", ".ndjson"):
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                where = f"{path}:{lineno}"
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise InputError(f"{where}: invalid JSON ({exc.msg})") from None
                if not isinstance(obj, dict) or "label" not in obj:
                    raise InputError(f"{where}: expected an object with text_a/label fields")
                examples.append(_example_from_fields(schema, obj.get("text_a"), obj.get("text_b"), obj["label"], where))
        return examples
    width = 3 if schema.pair else 2
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file (a header line is required)")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path}: row {lineno}"
            if len(row) != width:
                raise InputError(f"{where}: expected {width} tab-separated fields for schema {schema}, got {len(row)}")
            text_b = row[1] if schema.pair else None
            examples.append(_example_from_fields(schema, row[0], text_b, row[-1], where))
    return examples


def write_tsv(path, examples: Sequence[RawExample], schema: Schema) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("text_a\ttext_b\tlabel\n" if schema.pair else "text_a\tlabel\n")
        for ex in examples:
            label = repr(float(ex.label)) if schema.regression else str(int(ex.label))
            cols = [ex.text_a, ex.text_b, label] if schema.pair else [ex.text_a, label]
            fh.write("\t".join(cols) + "\n")


@dataclass
class FewShotSplit:
    task: str
    k: int
    replicate: int
    seed: int
    train: list[RawExample]
    val: list[RawExample]
    test: list[RawExample]
    train_rows: list[int] = field(default_factory=list)
    val_rows: list[int] = field(default_factory=list)
    test_rows: list[int] = field(default_factory=list)


def held_out_size(corpus_size: int) -> int:
    return min(corpus_size // 2, TEST_CAP)


def build_fewshot_splits(corpus: Sequence[RawExample], k: int, replicates: int, seed: int,
                         task: str = "task") -> list[FewShotSplit]:
    """Common capped test set plus ``replicates`` independent K-row train/val draws.

    Row identities are source-corpus indices.
    """
    n = len(corpus)
    if k < 2 or replicates < 1:
        raise InputError("need k >= 2 and replicates >= 1")
    n_test = held_out_size(n)
    if n - n_test < k:
        minimum = 2 * k - 1 if k <= TEST_CAP else k + TEST_CAP
        raise InputError(f"corpus too small: {n} rows; need at least {minimum} rows for K={k} "
                         f"(the test set takes half, capped at {TEST_CAP})")
    order = np.random.default_rng(seed).permutation(n)
    test_rows = order[:n_test].tolist()
    remainder = order[n_test:]
    n_train = int(round(TRAIN_FRACTION * k))
    test = [corpus[i] for i in test_rows]
    splits = []
    for r in range(replicates):
        rng = np.random.default_rng([seed, r])
        picked = remainder[rng.choice(len(remainder), size=k, replace=False)].tolist()
        train_rows, val_rows = picked[:n_train], picked[n_train:]
        splits.append(FewShotSplit(task=task, k=k, replicate=r, seed=seed,
                                   train=[corpus[i] for i in train_rows], val=[corpus[i] for i in val_rows],
                                   test=test, train_rows=train_rows, val_rows=val_rows, test_rows=test_rows))
    return splits


def split_manifest(splits: Sequence[FewShotSplit], schema: Schema, source: str | None = None) -> dict:
    first = splits[0]
    return {
        "task": first.task,
        "k": first.k,
        "seed": first.seed,
        "schema": str(schema),
        "source": source,
        "test_rows": first.test_rows,
        "replicates": [{"replicate": s.replicate, "train_rows": s.train_rows, "val_rows": s.val_rows}
                       for s in splits],
    }


def materialize_manifest(corpus: Sequence[RawExample], manifest: dict) -> list[FewShotSplit]:
    """Rebuild the splits described by a manifest from the source corpus."""
    test = [corpus[i] for i in manifest["test_rows"]]
    return [FewShotSplit(task=manifest["task"], k=manifest["k"], replicate=r["replicate"], seed=manifest["seed"],
                         train=[corpus[i] for i in r["train_rows"]], val=[corpus[i] for i in r["val_rows"]],
                         test=test, train_rows=list(r["train_rows"]), val_rows=list(r["val_rows"]),
                         test_rows=list(manifest["test_rows"]))
            for r in manifest["replicates"]]


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

TASK_KINDS = ("keyword-presence", "pair-overlap", "ordinal-regression")
TASK_SCHEMAS = {
    "keyword-presence": Schema(pair=False, num_classes=2),
    "pair-overlap": Schema(pair=True, num_classes=2),
    "ordinal-regression": Schema(pair=True, num_classes=None),
}
OVERLAP_THRESHOLD = 0.5


class SyntheticLanguage:
    """A Markov-chain "language" over tokens ``w000..``: each token prefers a few successors.

    The chain gives masked-token pretraining something to learn.
    """

    def __init__(self, vocab_size: int = 200, seed: int = 0, successors: int = 4, follow_prob: float = 0.8):
        if vocab_size < 10:
            raise InputError("vocab_size must be >= 10")
        rng = np.random.default_rng([seed, 9001])
        self.vocab_size = vocab_size
        self.words = [f"w{i:03d}" for i in range(vocab_size)]
        ranks = np.arange(1, vocab_size + 1, dtype=float)
        self.unigram = (1.0 / ranks) / np.sum(1.0 / ranks)
        self.successors = rng.choice(vocab_size, size=(vocab_size, successors))
        self.follow_prob = follow_prob
        self.keyword = vocab_size // 2

    def sentence_ids(self, rng: np.random.Generator, length: int, exclude: set[int] = frozenset()) -> list[int]:
        ids: list[int] = []
        while len(ids) < length:
            if ids and rng.random() < self.follow_prob:
                nxt = int(rng.choice(self.successors[ids[-1]]))
            else:
                nxt = int(rng.choice(self.vocab_size, p=self.unigram))
            if nxt not in exclude:
                ids.append(nxt)
        return ids

    def text(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)

    def corpus(self, size: int, seed: int, min_len: int = 6, max_len: int = 16) -> list[str]:
        """Unlabeled sentences for pretraining."""
        rng = np.random.default_rng([seed, 9002])
        return [self.text(self.sentence_ids(rng, int(rng.integers(min_len, max_len + 1)))) for _ in range(size)]


def _overlap_pair(lang: SyntheticLanguage, rng: np.random.Generator) -> tuple[list[int], list[int], float]:
    a = lang.sentence_ids(rng, int(rng.integers(6, 13)))
    share = rng.random()
    b: list[int] = []
    length = int(rng.integers(6, 13))
    pool = set(a)
    while len(b) < length:
        if rng.random() < share:
            b.append(int(rng.choice(a)))
        else:
            b.extend(lang.sentence_ids(rng, 1, exclude=pool))
    overlap = len(set(b) & pool) / len(set(b))
    return a, b, overlap


def generate_synthetic_task(kind: str, size: int, vocab_size: int = 200, noise: float = 0.0,
                            seed: int = 0) -> list[RawExample]:
    """Deterministic synthetic corpus for one of :data:`TASK_KINDS`.

    * keyword-presence: label 1 iff the designated keyword occurs in the sentence.
    * pair-overlap: label 1 iff at least half of text_b's distinct tokens occur in text_a.
    * ordinal-regression: label = 5 * that overlap fraction, rounded to 0.25.

    With probability ``noise`` a class label is flipped, or a regression label
    is replaced by a uniform draw on [0, 5].
    """
    if kind not in TASK_KINDS:
        raise InputError(f"unknown task kind {kind!r}; choose from {', '.join(TASK_KINDS)}")
    if size < 1:
        raise InputError("size must be >= 1")
    if not 0.0 <= noise < 0.5:
        raise InputError(f"noise must lie in [0, 0.5), got {noise}")
    lang = SyntheticLanguage(vocab_size, seed=seed)
    rng = np.random.default_rng([seed, TASK_KINDS.index(kind)])
    out = []
    for _ in range(size):
        if kind == "keyword-presence":
            ids = lang.sentence_ids(rng, int(rng.integers(6, 16)), exclude={lang.keyword})
            label = int(rng.random() < 0.5)
            if label:
                ids.insert(int(rng.integers(0, len(ids) + 1)), lang.keyword)
            if rng.random() < noise:
                label = 1 - label
            out.append(RawExample(lang.text(ids), None, label))
            continue
        a, b, overlap = _overlap_pair(lang, rng)
        if kind == "pair-overlap":
            label = int(overlap >= OVERLAP_THRESHOLD)
            if rng.random() < noise:
                label = 1 - label
        else:
            label = round(4 * 5.0 * overlap) / 4
            if rng.random() < noise:
                label = float(rng.uniform(0.0, 5.0))
        out.append(RawExample(lang.text(a), lang.text(b), label))
    return out


def clean_label(kind: str, example: RawExample, vocab_size: int = 200, seed: int = 0):
    """Noise-free label recomputed from the text (classification kinds)."""
    lang = SyntheticLanguage(vocab_size, seed=seed)
    if kind == "keyword-presence":
        return int(lang.words[lang.keyword] in example.text_a.split())
    if kind == "pair-overlap":
        a, b = set(example.text_a.split()), set(example.text_b.split())
        return int(len(a & b) / len(b) >= OVERLAP_THRESHOLD)
    raise InputError(f"no clean label rule for {kind!r}")


def save_examples_jsonl(path, examples: Sequence[RawExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(asdict(ex)) + "\n")
