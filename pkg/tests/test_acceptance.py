"""Acceptance gate. One test per criterion; each prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` (the lines are printed
even without ``-s``). The directional experiment and the ablation share one
pretrained base encoder, built once per module.
"""

import json
import time
import zlib

import numpy as np
import pytest

from helpers import reference_prefix_tuning, tiny_task
from test_tensor import PRIMITIVES
from prefixsub import experiment as X
from prefixsub import tensor as T
from prefixsub.cli import main
from prefixsub.data import TASK_KINDS, TASK_SCHEMAS, build_fewshot_splits, generate_synthetic_task, load_corpus
from prefixsub.evaluation import (EvalConfig, bootstrap_significance, centroid_metric, encode_examples,
                                  stochastic_dev_metric, vertex_metric)
from prefixsub.gradcheck import (analytic_gradients, check_gradients, directional_derivative, max_relative_error,
                                 numerical_entries, numerical_gradient)
from prefixsub.model import Encoder, ModelConfig, freeze_base
from prefixsub.subspace import SamplePlan, centroid, draw_plan, init_simplex, materialize_prefixes, sample_weights
from prefixsub.tokenizer import TokenSequence, collate
from prefixsub.trainer import SHUFFLE_STREAM, TrainConfig, build_model, fit, task_loss

# Desk-scale experiment settings (shared by the directional run, the line scan and the ablation).
BASE_STEPS = 1500
BASE_LR = 1e-3
LEARNING_RATES = [3e-3, 1e-2, 3e-2]
CORPUS_SIZE = 1000
DATA_SEED = 1
SPLIT_SEED = 7
REPLICATES = 10
NON_INFERIORITY = 0.005  # 0.5 points on the 0-1 metric scale


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, passed: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}", flush=True)
        return passed
    return emit


def emit_block(capsys, text: str) -> None:
    with capsys.disabled():
        print("\n" + text, flush=True)


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------

FULL_CHECK_MAX = 256
SAMPLED_ENTRIES = 256
DIRECTIONS = 4


def end_to_end_setup():
    cfg = ModelConfig(vocab_size=30, num_layers=2, d_model=32, num_heads=2, d_ff=64, max_seq_len=16)
    encoder = Encoder(cfg, seed=0)
    freeze_base(encoder)
    model = build_model(encoder, TrainConfig(n_vertices=3, prefix_len=2, seed=2), TASK_SCHEMAS["keyword-presence"])
    rng = np.random.default_rng(3)
    batch = collate([TokenSequence(list(rng.integers(5, 30, size=n)), label=n % 2) for n in (6, 8, 5)])
    plan = model.draw_plan([(0, i) for i in range(3)], seed=1)
    return model, lambda: task_loss(model.forward(batch, plan), batch.labels, False)


def test_criterion_1_gradients(f64, report):
    start = time.time()
    worst_primitive = 0.0
    for name, (fn, shapes) in PRIMITIVES.items():
        rng = np.random.default_rng(zlib.crc32(b"acceptance-" + name.encode()))
        for _ in range(10):
            params = [T.parameter(rng.normal(size=s)) for s in shapes]
            weights = rng.normal(size=fn(*params).shape)
            worst_primitive = max(worst_primitive,
                                  check_gradients(lambda: (fn(*params) * T.Tensor(weights)).sum(), params))

    model, loss_fn = end_to_end_setup()
    params = model.trainable_parameters()
    analytic = analytic_gradients(loss_fn, params)
    rng = np.random.default_rng(4)
    worst_entry, worst_direction, entries = 0.0, 0.0, 0
    for p, g in zip(params, analytic):
        if p.size <= FULL_CHECK_MAX:
            worst_entry = max(worst_entry, max_relative_error(g, numerical_gradient(loss_fn, p)))
            entries += p.size
            continue
        idx = rng.choice(p.size, size=SAMPLED_ENTRIES, replace=False)
        worst_entry = max(worst_entry, max_relative_error(g.reshape(-1)[idx], numerical_entries(loss_fn, p, idx)))
        entries += SAMPLED_ENTRIES
        for _ in range(DIRECTIONS):
            d = rng.normal(size=p.shape)
            numeric = directional_derivative(loss_fn, [p], [d])
            worst_direction = max(worst_direction, max_relative_error(np.sum(g * d), numeric))
    d_all = [rng.normal(size=p.shape) for p in params]
    joint = max_relative_error(sum(np.sum(g * d) for g, d in zip(analytic, d_all)),
                               directional_derivative(loss_fn, params, d_all))
    elapsed = time.time() - start
    worst = max(worst_primitive, worst_entry, worst_direction, joint)
    ok = worst < 1e-4 and elapsed < 120
    detail = (f"primitives {worst_primitive:.2e}, end-to-end entries {worst_entry:.2e} ({entries} checked), "
              f"directional {max(worst_direction, joint):.2e}, {len(params)} tensors, {elapsed:.1f}s")
    assert report(1, "gradient suite", ok, detail)


# ---------------------------------------------------------------------------
# 2. simplex algebra
# ---------------------------------------------------------------------------

def _prefix_stack(pairs, row=None):
    pick = (lambda t: t.data) if row is None else (lambda t: t.data[row])
    return np.stack([np.stack([pick(p.key), pick(p.value)]) for p in pairs])


def test_criterion_2_simplex_algebra(f64, report):
    start = time.time()
    cfg = ModelConfig(vocab_size=20, num_layers=2, d_model=8, num_heads=2, d_ff=16, max_seq_len=16, prefix_len=3)
    simplex, heads = init_simplex(cfg, 4, seed=1)
    checks = {}

    one_hot = True
    for j in range(4):
        got = materialize_prefixes(simplex, SamplePlan.constant(2, cfg.num_layers, np.eye(4)[j], np.ones(4) / 4))
        want = _prefix_stack(simplex.vertex_prefixes(j))
        one_hot &= all(np.array_equal(_prefix_stack(got, b), want) for b in range(2))
    checks["one-hot"] = one_hot

    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        a = rng.random()
        w1, w2 = (rng.dirichlet(np.ones(4), size=(2, cfg.num_layers, 2)) for _ in range(2))
        head = np.full((2, 4), 0.25)
        mix = materialize_prefixes(simplex, SamplePlan(a * w1 + (1 - a) * w2, head))
        m1 = materialize_prefixes(simplex, SamplePlan(w1, head))
        m2 = materialize_prefixes(simplex, SamplePlan(w2, head))
        worst = max(worst, float(np.max(np.abs(_prefix_stack(mix) - (a * _prefix_stack(m1) + (1 - a) * _prefix_stack(m2))))))
    checks["linearity"] = worst < 1e-12

    c = centroid(simplex, heads)
    brute = sum(_prefix_stack(simplex.vertex_prefixes(i)) for i in range(4)) / 4
    head_mean = sum(h.weight.data for h in heads.heads) / 4
    checks["centroid"] = (np.max(np.abs(_prefix_stack(c.prefixes) - brute)) < 1e-12
                          and np.max(np.abs(c.head.weight.data - head_mean)) < 1e-12)

    plan = draw_plan([(0, r) for r in range(10_000)], seed=3, num_layers=2, n_prefix=4, n_head=4)
    checks["10k plans on simplex"] = all(np.max(np.abs(w.sum(axis=-1) - 1)) <= 1e-9 and np.all(w >= 0)
                                         for w in (plan.prefix, plan.head))

    draws = np.array([sample_weights(3, np.random.default_rng([2024, i])) for i in range(100_000)])
    mean_err = float(np.max(np.abs(draws.mean(axis=0) - 1 / 3)))
    checks["Dirichlet mean"] = mean_err < 0.01

    elapsed = time.time() - start
    ok = all(checks.values()) and elapsed < 60
    failed = [k for k, v in checks.items() if not v]
    detail = (f"{len(checks) - len(failed)}/{len(checks)} checks"
              f"{' (failed: ' + ', '.join(failed) + ')' if failed else ''}, "
              f"linearity err {worst:.1e}, Dirichlet mean err {mean_err:.4f}, {elapsed:.1f}s")
    assert report(2, "simplex algebra suite", ok, detail)


# ---------------------------------------------------------------------------
# 3. degeneracy
# ---------------------------------------------------------------------------

def test_criterion_3_single_vertex_is_prefix_tuning(f64, report):
    t = tiny_task(k=286, size=600, pretrain_steps=0)
    assert len(t.train) == 200
    cfg = TrainConfig(n_vertices=1, prefix_len=2, epochs=5, patience=5, batch_size=16, learning_rate=5e-3, seed=4)
    model = build_model(t.encoder, cfg, t.train.schema)
    prefix_params = {k: T.parameter(v.data.copy()) for k, v in model.prefix.vertices[0].params.items()}
    head = model.heads.heads[0]
    hw, hb = T.parameter(head.weight.data.copy()), T.parameter(head.bias.data.copy())
    losses = []
    fit(model, t.train, t.val, cfg, "accuracy", on_step=lambda e, s, loss: losses.append(loss))
    ref = reference_prefix_tuning(t.encoder, t.train, prefix_params, hw, hb, epochs=5, batch_size=16, lr=5e-3,
                                  seed=4, shuffle_stream=SHUFFLE_STREAM)
    gap = max(abs(a - b) for a, b in zip(losses, ref))
    ok = len(losses) == len(ref) == 5 * 13 and gap <= 1e-12
    assert report(3, "degeneracy equivalence", ok, f"{len(losses)} steps over 5 epochs, max loss gap {gap:.1e}")


# ---------------------------------------------------------------------------
# 4. stochastic dev metric
# ---------------------------------------------------------------------------

def test_criterion_4_stochastic_dev_consistency(report):
    task = tiny_task(k=100, size=400, pretrain_steps=400)
    cfg = TrainConfig(n_vertices=6, prefix_len=2)
    degenerate = build_model(task.encoder, cfg, task.val.schema)
    for v in degenerate.prefix.vertices[1:]:
        for name, t in degenerate.prefix.vertices[0].params.items():
            v.params[name].data = t.data.copy()
    for h in degenerate.heads.heads[1:]:
        h.weight.data = degenerate.heads.heads[0].weight.data.copy()
        h.bias.data = degenerate.heads.heads[0].bias.data.copy()
    ref = centroid_metric(degenerate, task.test, "accuracy")
    identical = all(stochastic_dev_metric(degenerate, task.test, "accuracy", EvalConfig(n_concat=n, seed=s)) == ref
                    for n in (1, 10) for s in range(5))

    train_cfg = TrainConfig(n_vertices=6, prefix_len=2, epochs=8, patience=8, learning_rate=1e-2)
    model = build_model(task.encoder, train_cfg, task.train.schema)
    fit(model, task.train, task.val, train_cfg, "accuracy")
    spread = {n: float(np.std([stochastic_dev_metric(model, task.test, "accuracy", EvalConfig(n_concat=n, seed=s))
                               for s in range(50)])) for n in (1, 10)}
    ok = identical and spread[10] < spread[1]
    detail = (f"identical vertices give centroid metric exactly: {identical}; "
              f"std over 50 seeds n_concat=1 {spread[1]:.4f}, n_concat=10 {spread[10]:.4f}")
    assert report(4, "stochastic-dev consistency", ok, detail)


# ---------------------------------------------------------------------------
# 5. split protocol
# ---------------------------------------------------------------------------

def test_criterion_5_split_protocol(report):
    corpus = generate_synthetic_task("keyword-presence", 1000, seed=0)
    splits = build_fewshot_splits(corpus, 100, 10, 7)
    sizes = all(len(s.test) == 500 and len(s.train) == 70 and len(s.val) == 30 for s in splits)
    shared_test = all(s.test_rows == splits[0].test_rows for s in splits)
    disjoint = all(not (set(s.train_rows) & set(s.val_rows)) and not (set(s.train_rows + s.val_rows) & set(s.test_rows))
                   and len(set(s.train_rows)) == 70 and len(set(s.val_rows)) == 30 for s in splits)
    big = build_fewshot_splits(generate_synthetic_task("keyword-presence", 20_000, seed=0), 100, 1, 7)[0]
    ok = sizes and shared_test and disjoint and len(big.test) == 5000
    detail = (f"sizes 500/70/30 {sizes}, shared test {shared_test}, disjoint {disjoint}, "
              f"20000-row test size {len(big.test)}")
    assert report(5, "split protocol fixture", ok, detail)


# ---------------------------------------------------------------------------
# shared desk-scale setup for 6-8
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    start = time.time()
    assert main(["pretrain", "--out", str(root / "base.ckpt"), "--steps", str(BASE_STEPS), "--lr", str(BASE_LR),
                 "--seed", "0"]) == 0
    base_seconds = time.time() - start
    config = {"base": "base.ckpt", "learning_rates": LEARNING_RATES}
    (root / "config.json").write_text(json.dumps(config))
    return {"root": root, "base_seconds": base_seconds}


def prepare(root, kind: str, k: int) -> float:
    start = time.time()
    out = root / "data" / f"{kind}-K{k}"
    assert main(["prepare", "--synthetic", kind, "--size", str(CORPUS_SIZE), "--data-seed", str(DATA_SEED),
                 "--k", str(k), "--replicates", str(REPLICATES), "--seed", str(SPLIT_SEED), "--out", str(out)]) == 0
    return time.time() - start


def test_criterion_6_directional_experiment(desk, report, capsys):
    root = desk["root"]
    start = time.time()
    for kind in TASK_KINDS:
        for k in (50, 100):
            prepare(root, kind, k)
    out = root / "directional"
    for suite in ("full", "prefix-tuning"):
        assert main(["ablate", "--suite", suite, "--data", str(root / "data"), "--out", str(out),
                     "--config", str(root / "config.json")]) == 0
    elapsed = time.time() - start + desk["base_seconds"]

    records = {s: X.collect_results(out / s) for s in ("full", "prefix-tuning")}
    by_key = {s: {(r["task"], r["k"], r["replicate"]): r["test_metric"] for r in recs} for s, recs in records.items()}
    lines = ["task\tK\tfull\tprefix-tuning\tdiff\tp"]
    for kind in TASK_KINDS:
        for k in (50, 100):
            keys = [(kind, k, r) for r in range(REPLICATES)]
            a = [by_key["full"][key] for key in keys]
            b = [by_key["prefix-tuning"][key] for key in keys]
            p = bootstrap_significance(a, b)["p"]
            lines.append(f"{kind}\t{k}\t{np.mean(a):.4f}\t{np.mean(b):.4f}\t{np.mean(a) - np.mean(b):+.4f}\t{p:.4f}")
    table = json.loads((out / "ablation.json").read_text())
    for row in table["rows"]:
        if row["variant"] == "prefix-tuning":
            pooled = ", ".join(f"K={k}: p={row['p'][k]:.4f}" for k in sorted(row["p"], key=int))
    shared = sorted(by_key["full"])
    mean_full = float(np.mean([by_key["full"][key] for key in shared]))
    mean_pt = float(np.mean([by_key["prefix-tuning"][key] for key in shared]))
    p_all = bootstrap_significance([by_key["full"][key] for key in shared],
                                   [by_key["prefix-tuning"][key] for key in shared])["p"]
    lines.append(f"pooled over tasks: {pooled}; all 60 pairs p={p_all:.4f}")
    emit_block(capsys, "\n".join(lines))

    ok = len(shared) == 60 and mean_full >= mean_pt - NON_INFERIORITY and elapsed < 1800
    detail = (f"mean full {mean_full:.4f} vs prefix tuning {mean_pt:.4f} (bound {mean_pt - NON_INFERIORITY:.4f}), "
              f"p={p_all:.4f}, {elapsed / 60:.1f} min")
    assert report(6, "desk-scale directional experiment", ok, detail)


def test_criterion_7_line_scan(desk, report):
    root = desk["root"]
    data = root / "data" / "keyword-presence-K50"
    if not data.exists():
        prepare(root, "keyword-presence", 50)
    cfg = json.loads((root / "config.json").read_text())
    cfg.update(n_vertices=2, base=str(root / "base.ckpt"))
    (root / "line.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "line.json"), "--data", str(data), "--replicate", "0",
                 "--out", str(root / "line")]) == 0
    ckpt = X.run_dir(root / "line", "keyword-presence", 50, 0) / "simplex.ckpt"
    scan_out = root / "scan.tsv"
    assert main(["scan", "--model-line", str(ckpt), "--split", str(data / "test.tsv"), "--out", str(scan_out)]) == 0
    rows = [tuple(map(float, line.split("\t"))) for line in scan_out.read_text().splitlines()[1:]]
    loaded = X.load_trained(ckpt)
    split = encode_examples(load_corpus(data / "test.tsv", loaded.schema), loaded.vocab, loaded.schema,
                            loaded.encoder.config.max_seq_len)
    at_one = vertex_metric(loaded.model, split, "accuracy", 0)
    at_zero = vertex_metric(loaded.model, split, "accuracy", 1)
    ok = len(rows) == 11 and rows[0][1] == at_zero and rows[-1][1] == at_one
    curve = " ".join(f"{m:.3f}" for _, m in rows)
    assert report(7, "line-scan artifact", ok, f"{len(rows)} points, endpoints {rows[0][1]!r}/{rows[-1][1]!r} vs "
                                               f"vertices {at_zero!r}/{at_one!r}; curve {curve}")


def test_criterion_8_ablation_harness(desk, report, capsys):
    root = desk["root"]
    data = root / "data" / "keyword-presence-K50"
    if not data.exists():
        prepare(root, "keyword-presence", 50)
    out = root / "ablation"
    start = time.time()
    suites = ["full", "line", "deterministic", "head-only", "prefix-only"]
    codes = [main(["ablate", "--suite", s, "--data", str(data), "--out", str(out),
                   "--config", str(root / "config.json")]) for s in suites]
    elapsed = time.time() - start
    tsv = (out / "ablation.tsv").read_text()
    emit_block(capsys, tsv.rstrip())
    lines = tsv.splitlines()
    variants = [line.split("\t")[0] for line in lines[1:]]
    ok = (codes == [0] * 5 and lines[0] == "variant\tK=50\tp(K=50)" and sorted(variants) == sorted(suites)
          and all(line.split("\t")[2] for line in lines[2:]) and elapsed < 1200)
    assert report(8, "ablation harness", ok, f"{len(variants)} variants x K=50, {elapsed / 60:.1f} min")
