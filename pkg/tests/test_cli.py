"""
End-to-end tests for the command line
"""
import json
import os
import time

import pytest

from main import build_parser, resolve_config, run
from services.storage import manifest_path, parse_records, read_csv, read_records, read_report

pytestmark = pytest.mark.integration

GENERATE = ["--n-cases", "10", "--controls-per-case", "2", "--max-visits", "8", "--seed", "3"]
DESK_BUDGET_SECONDS = 300


def pipeline(directory, model="retain"):
    """generate -> train -> eval -> interpret inside one directory; returns the output paths"""
    paths = {
        "data": os.path.join(directory, "cohort.jsonl"),
        "checkpoint": os.path.join(directory, "model.json"),
        "report": os.path.join(directory, "report.json"),
        "contributions": os.path.join(directory, "contrib.csv"),
    }
    assert run(["generate", "--out", paths["data"]] + GENERATE) == 0
    assert run(["train", "--data", paths["data"], "--checkpoint", paths["checkpoint"], "--model", model,
                "--size", "4", "--epochs", "2", "--batch-size", "10", "--seed", "3"]) == 0
    assert run(["eval", "--data", paths["data"], "--checkpoint", paths["checkpoint"], "--split", "train",
                "--out", paths["report"]]) == 0
    if model.startswith("retain"):
        assert run(["interpret", "--data", paths["data"], "--checkpoint", paths["checkpoint"],
                    "--patient", "P000000", "--out", paths["contributions"]]) == 0
    paths["loss_csv"] = paths["checkpoint"] + ".loss.csv"
    return paths


class TestPipeline:

    def test_end_to_end(self, temp_dir):
        print("🧪 Testing generate, train, eval and interpret...")
        paths = pipeline(temp_dir)
        cohort = read_records(paths["data"])
        assert len(cohort) == 30
        assert os.path.exists(os.path.join(temp_dir, "vocab.json"))
        assert os.path.exists(manifest_path(paths["data"]))
        assert os.path.exists(manifest_path(paths["checkpoint"]))

        report = read_report(paths["report"])
        assert report.split.value == "train"
        assert report.n_patients == 22
        assert 0.0 <= report.auc <= 1.0
        assert report.train_seconds is None

        loss_rows = read_csv(paths["loss_csv"])
        assert [row["epoch"] for row in loss_rows] == ["1", "2"]

        rows = read_csv(paths["contributions"])
        patient = cohort.get("P000000")
        assert len(rows) == sum(len(v.codes) for v in patient.visits)
        assert {row["code_name"][:3] for row in rows} <= {"DX_", "RX_", "PX_"}

    def test_reruns_are_byte_identical(self, temp_dir):
        print("🧪 Testing that a seeded pipeline reproduces its files...")
        first = pipeline(os.path.join(temp_dir, "a"))
        second = pipeline(os.path.join(temp_dir, "b"))
        for key in ("data", "checkpoint", "loss_csv", "report", "contributions"):
            with open(first[key], "rb") as f1, open(second[key], "rb") as f2:
                assert f1.read() == f2.read(), key

    def test_baseline_checkpoint(self, temp_dir):
        paths = pipeline(temp_dir, model="lr")
        assert run(["interpret", "--data", paths["data"], "--checkpoint", paths["checkpoint"],
                    "--patient", "P000000", "--out", os.path.join(temp_dir, "c.csv")]) == 2

    def test_search(self, temp_dir):
        data = os.path.join(temp_dir, "cohort.jsonl")
        out = os.path.join(temp_dir, "trials.json")
        assert run(["generate", "--out", data] + GENERATE) == 0
        assert run(["search", "--data", data, "--trials", "1", "--profile", "desk", "--out", out]) == 0
        with open(out, encoding="utf-8") as f:
            trials = json.load(f)
        assert len(trials) == 1 and trials[0]["size"] in (16, 32)


class TestExitCodes:

    def test_usage(self):
        assert run(["bogus"]) == 2
        assert run(["--help"]) == 0
        assert run(["train", "--data", "x.jsonl"]) == 2

    def test_invalid_training_settings(self, temp_dir):
        assert run(["train", "--data", "x.jsonl", "--checkpoint", "y.json", "--epochs", "0"]) == 2
        assert run(["train", "--data", "x.jsonl", "--checkpoint", "y.json", "--dropout-v", "1.0"]) == 2

    def test_invalid_cohort_settings(self, temp_dir):
        out = os.path.join(temp_dir, "c.jsonl")
        assert run(["generate", "--out", out, "--controls-per-case", "0"]) == 2

    def test_unknown_patient_and_missing_checkpoint(self, temp_dir):
        data = os.path.join(temp_dir, "cohort.jsonl")
        ckpt = os.path.join(temp_dir, "model.json")
        assert run(["generate", "--out", data] + GENERATE) == 0
        assert run(["eval", "--data", data, "--checkpoint", ckpt, "--out", os.path.join(temp_dir, "r.json")]) == 1
        assert run(["train", "--data", data, "--checkpoint", ckpt, "--size", "4", "--epochs", "1"]) == 0
        assert run(["interpret", "--data", data, "--checkpoint", ckpt, "--patient", "P999999",
                    "--out", os.path.join(temp_dir, "c.csv")]) == 2
        assert run(["interpret", "--data", data, "--checkpoint", ckpt, "--patient", "P000000", "--step", "99",
                    "--out", os.path.join(temp_dir, "c.csv")]) == 2

    def test_malformed_records(self, temp_dir):
        data = os.path.join(temp_dir, "bad.jsonl")
        with open(data, "w", encoding="utf-8") as f:
            f.write("not json\n")
        assert run(["train", "--data", data, "--checkpoint", os.path.join(temp_dir, "m.json")]) == 1


class TestGradcheck:

    def test_passes(self, capsys):
        print("🧪 Testing the gradcheck subcommand...")
        assert run(["gradcheck", "--model", "retain", "--seed", "7", "--out", "-"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "parameter,max_relative_error"
        assert any(line.startswith("W_emb,") for line in lines)

    def test_table_stays_off_stdout_without_dash(self, temp_dir, capsys):
        out = os.path.join(temp_dir, "grad.csv")
        assert run(["gradcheck", "--model", "lr", "--out", out]) == 0
        assert run(["gradcheck", "--model", "lr"]) == 0
        captured = capsys.readouterr()
        assert captured.out == ""
        assert "W_out" in captured.err
        assert [row["parameter"] for row in read_csv(out)] == ["W_out", "b_out"]

    def test_zero_tolerance_fails(self):
        assert run(["gradcheck", "--model", "lr", "--tolerance", "0"]) == 1

    def test_table_copy(self, temp_dir):
        out = os.path.join(temp_dir, "grad.csv")
        assert run(["gradcheck", "--model", "rnn-attn-rnn", "--task", "esm", "--out", out]) == 0
        rows = read_csv(out)
        assert all(float(row["max_relative_error"]) <= 1e-4 for row in rows)
        assert any(row["parameter"].startswith("visit.") for row in rows)

    def test_accepts_paper_dims(self):
        assert run(["gradcheck", "--model", "lr", "--paper-dims"]) == 0


class TestConfigResolution:

    def test_flags_override_file(self, temp_dir):
        path = os.path.join(temp_dir, "config.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"seed": 5, "model_kind": "lr", "train": {"epochs": 7, "batch_size": 3}}, f)
        args = build_parser().parse_args(["train", "--data", "x", "--checkpoint", "y", "--config", path,
                                          "--epochs", "2"])
        config = resolve_config(args)
        assert config.seed == 5 and config.train.seed == 5
        assert config.train.epochs == 2
        assert config.train.batch_size == 3
        assert config.model_kind.value == "lr"

    def test_defaults(self):
        args = build_parser().parse_args(["generate", "--out", "x.jsonl", "--motif", "gap"])
        config = resolve_config(args)
        assert config.seed == 0
        assert config.cohort.motif_kind == "gap"
        assert config.cohort.n_cases == 100
        assert config.train.epochs == 30

    def test_paper_dims_flag(self):
        for flag in ("--paper-dims", "--full-dims"):
            args = build_parser().parse_args(["train", "--data", "x", "--checkpoint", "y", flag])
            assert resolve_config(args).full_dims
        args = build_parser().parse_args(["train", "--data", "x", "--checkpoint", "y"])
        assert not resolve_config(args).full_dims

    def test_unreadable_config(self, temp_dir):
        assert run(["gradcheck", "--model", "lr", "--config", os.path.join(temp_dir, "absent.json")]) == 2


def test_generate_to_stdout(capsys):
    assert run(["generate", "--out", "-", "--n-cases", "2", "--controls-per-case", "1", "--max-visits", "5"]) == 0
    records = parse_records(capsys.readouterr().out)
    assert len(records) == 4
    assert sorted(r.split.value for r in records) == ["test", "train", "train", "train"]


@pytest.mark.timeout(DESK_BUDGET_SECONDS)
def test_desk_pipeline_fits_the_budget(temp_dir):
    print("🧪 Testing the default desk pipeline against its time budget...")
    started = time.perf_counter()
    data = os.path.join(temp_dir, "cohort.jsonl")
    checkpoint = os.path.join(temp_dir, "retain.json")
    assert run(["generate", "--out", data]) == 0
    assert len(read_records(data)) == 1100
    assert run(["train", "--data", data, "--checkpoint", checkpoint]) == 0
    assert run(["eval", "--data", data, "--checkpoint", checkpoint, "--out", os.path.join(temp_dir, "r.json")]) == 0
    assert run(["interpret", "--data", data, "--checkpoint", checkpoint, "--patient", "P000000",
                "--out", os.path.join(temp_dir, "c.csv")]) == 0
    assert time.perf_counter() - started < DESK_BUDGET_SECONDS
