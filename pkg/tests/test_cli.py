import json

import numpy as np
import pytest

from prefixsub import experiment as X
from prefixsub.cli import evaluate_checkpoint, main
from prefixsub.evaluation import vertex_metric, encode_examples
from prefixsub.data import load_corpus

TINY = ["--layers", "1", "--d-model", "16", "--heads", "2", "--d-ff", "32", "--max-seq-len", "40",
        "--vocab-size", "60", "--sentences", "200"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["pretrain", "--out", str(root / "base.ckpt"), "--steps", "30", "--seed", "1"] + TINY) == 0
    assert main(["prepare", "--synthetic", "keyword-presence", "--size", "200", "--vocab-size", "60",
                 "--k", "50", "--replicates", "3", "--seed", "7", "--out", str(root / "data" / "kw50")]) == 0
    config = {"base": "base.ckpt", "epochs": 2, "patience": 2, "n_vertices": 2, "n_concat": 2, "prefix_len": 2,
              "learning_rates": [5e-3, 1e-2]}
    (root / "cfg.json").write_text(json.dumps(config))
    return root


def run_path(root, out="runs", replicate=0):
    return root / out / "keyword-presence" / "50" / str(replicate)


class TestPrepare:
    def test_layout(self, workspace):
        data = workspace / "data" / "kw50"
        manifest = json.loads((data / "manifest.json").read_text())
        assert len(manifest["replicates"]) == 3 and len(manifest["test_rows"]) == 100
        for r in range(3):
            assert len(load_corpus(data / f"replicate_{r}" / "train.tsv", X.load_prepared(data)[1])) == 35
        assert (data / "test.tsv").is_file()

    def test_ten_replicates_from_tsv(self, tmp_path):
        corpus = tmp_path / "c.tsv"
        corpus.write_text("text_a\tlabel\n" + "".join(f"row {i}\t{i % 2}\n" for i in range(300)))
        assert main(["prepare", "--input", str(corpus), "--schema", "single:class:2", "--k", "50",
                     "--replicates", "10", "--seed", "3", "--out", str(tmp_path / "d")]) == 0
        assert len(list((tmp_path / "d").glob("replicate_*/train.tsv"))) == 10
        assert len(list((tmp_path / "d").glob("replicate_*/val.tsv"))) == 10
        assert len(list((tmp_path / "d").glob("*.tsv"))) == 1

    def test_missing_input(self, tmp_path, capsys):
        code = main(["prepare", "--input", str(tmp_path / "absent.tsv"), "--schema", "single:class:2",
                     "--k", "5", "--out", str(tmp_path / "d")])
        assert code == 2 and "absent.tsv" in capsys.readouterr().err

    def test_refuses_rerun(self, workspace):
        args = ["prepare", "--synthetic", "keyword-presence", "--size", "200", "--vocab-size", "60", "--k", "50",
                "--replicates", "3", "--seed", "7", "--out", str(workspace / "data" / "kw50")]
        assert main(args) == 3

    def test_force_is_byte_identical(self, workspace, tmp_path):
        args = ["prepare", "--synthetic", "keyword-presence", "--size", "200", "--vocab-size", "60", "--k", "50",
                "--replicates", "3", "--seed", "7", "--out", str(tmp_path / "again"), "--force"]
        assert main(args) == 0
        for f in ("manifest.json", "test.tsv", "replicate_2/train.tsv"):
            assert (tmp_path / "again" / f).read_bytes() == (workspace / "data" / "kw50" / f).read_bytes()

    def test_small_corpus_error(self, tmp_path):
        assert main(["prepare", "--synthetic", "keyword-presence", "--size", "60", "--k", "50",
                     "--out", str(tmp_path / "d")]) == 2


@pytest.fixture(scope="module")
def trained(workspace):
    args = ["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data" / "kw50"),
            "--replicate", "0", "--out", str(workspace / "runs")]
    assert main(args) == 0
    return args


class TestTrain:
    def test_artifacts(self, workspace, trained):
        rdir = run_path(workspace)
        assert sorted(p.name for p in rdir.iterdir()) == ["model.ckpt", "result.json", "simplex.ckpt", "train.log"]
        record = json.loads((rdir / "result.json").read_text())
        assert record["fits"] == 2 and record["k"] == 50 and record["replicate"] == 0
        assert {"task", "dev_metric", "test_metric", "config_hash"} <= set(record)
        assert X.checkpoint_kind(rdir / "model.ckpt") == "baked"

    def test_one_log_block_per_learning_rate(self, workspace, trained):
        rows = (run_path(workspace) / "train.log").read_text().splitlines()
        assert rows[0] == "learning_rate\tepoch\ttrain_loss\tdev_metric\tstopped"
        assert sorted({r.split("\t")[0] for r in rows[1:]}) == ["0.005", "0.01"]

    def test_rerun_refused_then_identical_with_force(self, workspace, trained):
        assert main(trained) == 3
        before = {f: (run_path(workspace) / f).read_bytes() for f in X.RUN_FILES}
        assert main(trained + ["--force"]) == 0
        assert all((run_path(workspace) / f).read_bytes() == b for f, b in before.items())

    def test_seed_env_override(self, workspace, monkeypatch):
        monkeypatch.setenv("PREFIXSUB_SEED", "5")
        args = ["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data" / "kw50"),
                "--replicate", "1", "--out", str(workspace / "seeded")]
        assert main(args) == 0
        assert json.loads((run_path(workspace, "seeded", 1) / "result.json").read_text())["seed"] == 5

    def test_missing_base(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"base": "nowhere.ckpt"}))
        assert main(["train", "--config", str(cfg), "--data", str(workspace / "data" / "kw50"),
                     "--replicate", "0", "--out", str(tmp_path / "r")]) == 2

    def test_missing_splits(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "cfg.json"), "--data", str(tmp_path),
                     "--replicate", "0", "--out", str(tmp_path / "r")]) == 2

    def test_bad_config_key(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"base": str(workspace / "base.ckpt"), "epoch": 3}))
        assert main(["train", "--config", str(cfg), "--data", str(workspace / "data" / "kw50"),
                     "--replicate", "0", "--out", str(tmp_path / "r")]) == 2

    def test_eval(self, workspace, trained, capsys):
        rdir = run_path(workspace)
        split = str(workspace / "data" / "kw50" / "test.tsv")
        capsys.readouterr()
        assert main(["eval", "--model", str(rdir / "model.ckpt"), "--split", split, "--metric", "accuracy"]) == 0
        first = float(capsys.readouterr().out)
        assert main(["eval", "--model", str(rdir / "model.ckpt"), "--split", split, "--metric", "accuracy"]) == 0
        assert float(capsys.readouterr().out) == first
        assert first == json.loads((rdir / "result.json").read_text())["test_metric"]
        assert evaluate_checkpoint(rdir / "simplex.ckpt", split, "accuracy") == first

    def test_eval_stochastic(self, workspace, trained):
        rdir = run_path(workspace)
        split = str(workspace / "data" / "kw50" / "test.tsv")
        assert main(["eval", "--model", str(rdir / "model.ckpt"), "--split", split, "--metric", "accuracy",
                     "--stochastic"]) == 2
        assert main(["eval", "--model", str(rdir / "simplex.ckpt"), "--split", split, "--metric", "accuracy",
                     "--stochastic", "--n-concat", "3"]) == 0

    def test_eval_schema_mismatch(self, workspace, trained, tmp_path, capsys):
        pair = tmp_path / "pair.tsv"
        pair.write_text("text_a\ttext_b\tlabel\na\tb\t1\n")
        assert main(["eval", "--model", str(run_path(workspace) / "model.ckpt"), "--split", str(pair),
                     "--metric", "accuracy"]) == 2
        assert "schema" in capsys.readouterr().err

    def test_scan(self, workspace, trained, tmp_path):
        rdir = run_path(workspace)
        split = workspace / "data" / "kw50" / "test.tsv"
        out = tmp_path / "scan.tsv"
        assert main(["scan", "--model-line", str(rdir / "simplex.ckpt"), "--split", str(split), "--points", "11",
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "alpha\tmetric" and len(lines) == 12
        rows = [tuple(map(float, l.split("\t"))) for l in lines[1:]]
        assert [a for a, _ in rows] == [i / 10 for i in range(11)]
        loaded = X.load_trained(rdir / "simplex.ckpt")
        examples = encode_examples(load_corpus(split, loaded.schema), loaded.vocab, loaded.schema, 40)
        assert rows[-1][1] == vertex_metric(loaded.model, examples, "accuracy", 0)
        assert rows[0][1] == vertex_metric(loaded.model, examples, "accuracy", 1)
        assert json.loads(out.with_suffix(".json").read_text())["points"] == 11
        assert main(["scan", "--model-line", str(rdir / "simplex.ckpt"), "--split", str(split),
                     "--out", str(out)]) == 3

    def test_scan_rejects_baked_and_non_line(self, workspace, trained, tmp_path):
        split = str(workspace / "data" / "kw50" / "test.tsv")
        assert main(["scan", "--model-line", str(run_path(workspace) / "model.ckpt"), "--split", split,
                     "--out", str(tmp_path / "a.tsv")]) == 2
        cfg = json.loads((workspace / "cfg.json").read_text())
        cfg.update(n_vertices=3, learning_rates=[5e-3], base=str(workspace / "base.ckpt"))
        (tmp_path / "c3.json").write_text(json.dumps(cfg))
        assert main(["train", "--config", str(tmp_path / "c3.json"), "--data", str(workspace / "data" / "kw50"),
                     "--replicate", "0", "--out", str(tmp_path / "r3")]) == 0
        assert main(["scan", "--model-line", str(run_path(tmp_path, "r3") / "simplex.ckpt"), "--split", split,
                     "--out", str(tmp_path / "b.tsv")]) == 2


class TestAblateAndSweep:
    def test_ablate_table(self, workspace):
        out = workspace / "ablation"
        for suite in ("full", "line", "deterministic"):
            assert main(["ablate", "--suite", suite, "--data", str(workspace / "data"), "--out", str(out),
                         "--config", str(workspace / "cfg.json")]) == 0
        lines = (out / "ablation.tsv").read_text().splitlines()
        assert lines[0] == "variant\tK=50\tp(K=50)"
        assert [l.split("\t")[0] for l in lines[1:]] == ["full", "deterministic", "line"]
        table = json.loads((out / "ablation.json").read_text())
        assert all("50" in row["p"] for row in table["rows"] if row["variant"] != "full")
        line_cfg = X.load_trained(out / "line" / "keyword-presence" / "50" / "0" / "simplex.ckpt")
        assert line_cfg.model.prefix.n == 2
        det = json.loads((out / "deterministic" / "keyword-presence" / "50" / "0" / "result.json").read_text())
        assert det["variant"] == "deterministic"

    def test_unknown_suite(self, workspace):
        with pytest.raises(SystemExit) as exc:
            main(["ablate", "--suite", "everything", "--data", str(workspace / "data"), "--out", "x"])
        assert exc.value.code == 2

    def test_sweep_workers_match_serial(self, workspace):
        cfg = ["--config", str(workspace / "cfg.json"), "--data", str(workspace / "data")]
        assert main(["sweep"] + cfg + ["--out", str(workspace / "s1"), "--workers", "1"]) == 0
        assert main(["sweep"] + cfg + ["--out", str(workspace / "s2"), "--workers", "2"]) == 0
        for r in range(3):
            a = (run_path(workspace, "s1", r) / "result.json").read_bytes()
            assert a == (run_path(workspace, "s2", r) / "result.json").read_bytes()
        summary = (workspace / "s1" / "summary.tsv").read_text().splitlines()
        assert summary[0].startswith("task\tk\tmetric") and len(summary) == 2
