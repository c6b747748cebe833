"""Command-line workflows: generate, detect, attack, specdec, simulate,
calibrate."""

import json
import subprocess
import sys

import pytest

from wmkit.cli import main
from wmkit.simulation import POWER_CSV_HEADER

KEY_ARG = "9e3779b97f4a7c15:k=2:g=0.5:mode=hash"
MODEL_ARG = "markov:seed=11,vocab=64,order=2"


def _generate(tmp_path, name="texts.jsonl", extra=(), n=60, texts=3, seed=0):
    out = tmp_path / name
    rc = main(
        [
            "generate",
            "--model", MODEL_ARG,
            "--key", KEY_ARG,
            "--n", str(n),
            "--texts", str(texts),
            "--seed", str(seed),
            "--out", str(out),
            *extra,
        ]
    )
    assert rc == 0
    return out


def _records(path):
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]


class TestGenerate:
    def test_record_shape(self, tmp_path):
        out = _generate(tmp_path, texts=1)
        recs = _records(out)
        assert len(recs) == 1
        rec = recs[0]
        assert rec["text_id"] == 0
        assert len(rec["tokens"]) == rec["prompt_len"] + 60
        assert rec["scheme"] == "mc"
        assert rec["vocab_size"] == 64
        assert rec["watermarked"] is True

    def test_rerun_byte_identical(self, tmp_path):
        a = _generate(tmp_path, "a.jsonl")
        b = _generate(tmp_path, "b.jsonl")
        assert a.read_bytes() == b.read_bytes()

    def test_seed_changes_tokens(self, tmp_path):
        a = _generate(tmp_path, "a.jsonl", seed=0)
        b = _generate(tmp_path, "b.jsonl", seed=1)
        assert a.read_bytes() != b.read_bytes()

    def test_plain_flag(self, tmp_path):
        out = _generate(tmp_path, extra=("--plain",), texts=2)
        for rec in _records(out):
            assert rec["scheme"] == "plain"
            assert rec["watermarked"] is False

    def test_soft_requires_delta(self, tmp_path):
        rc = main(
            [
                "generate",
                "--model", MODEL_ARG,
                "--key", KEY_ARG,
                "--scheme", "soft",
                "--n", "10",
                "--out", str(tmp_path / "x.jsonl"),
            ]
        )
        assert rc == 2

    def test_soft_with_delta(self, tmp_path):
        out = _generate(tmp_path, extra=("--scheme", "soft", "--delta", "2.0"), texts=1)
        assert _records(out)[0]["scheme"] == "soft"

    def test_bad_key_string(self, tmp_path):
        rc = main(
            [
                "generate",
                "--model", MODEL_ARG,
                "--key", "zz:k=2",
                "--n", "10",
                "--out", str(tmp_path / "x.jsonl"),
            ]
        )
        assert rc == 2

    def test_stdout_when_no_out(self, capsys):
        rc = main(
            ["generate", "--model", MODEL_ARG, "--key", KEY_ARG, "--n", "5", "--texts", "1"]
        )
        assert rc == 0
        line = capsys.readouterr().out.strip()
        assert json.loads(line)["text_id"] == 0


class TestDetect:
    def test_watermarked_corpus_flagged(self, tmp_path, capsys):
        src = _generate(tmp_path, texts=4, n=120)
        out = tmp_path / "reports.jsonl"
        rc = main(
            ["detect", "--in", str(src), "--key", KEY_ARG, "--stat", "sum", "--out", str(out)]
        )
        assert rc == 0
        reports = _records(out)
        assert len(reports) == 4
        assert all(r["reject"] for r in reports)
        assert "TPR=1.0000" in capsys.readouterr().err

    def test_plain_corpus_mostly_passes(self, tmp_path, capsys):
        src = _generate(tmp_path, texts=4, n=120, extra=("--plain",))
        rc = main(["detect", "--in", str(src), "--key", KEY_ARG, "--stat", "sum"])
        assert rc == 0
        err = capsys.readouterr().err
        assert "FPR=" in err and "plain=4" in err

    def test_short_text_reports_error_record(self, tmp_path, capsys):
        src = tmp_path / "short.jsonl"
        src.write_text(json.dumps({"tokens": [1, 2], "prompt_len": 0}) + "\n")
        out = tmp_path / "r.jsonl"
        rc = main(["detect", "--in", str(src), "--key", KEY_ARG, "--stat", "sum", "--out", str(out)])
        assert rc == 0
        assert "error" in _records(out)[0]

    def test_hc_statistic_runs(self, tmp_path):
        src = _generate(tmp_path, texts=1, n=120)
        out = tmp_path / "r.jsonl"
        rc = main(
            [
                "detect",
                "--in", str(src),
                "--key", KEY_ARG,
                "--stat", "hc+",
                "--calib-reps", "1000",
                "--out", str(out),
            ]
        )
        assert rc == 0
        rec = _records(out)[0]
        assert rec["statistic"] == "hc+"
        assert rec["threshold"] is not None

    def test_missing_input_file(self, tmp_path):
        rc = main(["detect", "--in", str(tmp_path / "nope.jsonl"), "--key", KEY_ARG])
        assert rc == 1

    def test_unknown_stat_rejected(self, tmp_path):
        src = _generate(tmp_path, texts=1)
        rc = main(["detect", "--in", str(src), "--key", KEY_ARG, "--stat", "median"])
        assert rc == 2


class TestAttack:
    def test_substitution_preserves_records(self, tmp_path):
        src = _generate(tmp_path, texts=3)
        out = tmp_path / "attacked.jsonl"
        rc = main(
            ["attack", "--kind", "substitute", "--in", str(src), "--rate", "0.2", "--out", str(out)]
        )
        assert rc == 0
        originals, attacked = _records(src), _records(out)
        assert len(attacked) == len(originals)
        for orig, att in zip(originals, attacked):
            assert att["text_id"] == orig["text_id"]
            assert len(att["tokens"]) == len(orig["tokens"])
            assert att["tokens"][: att["prompt_len"]] == orig["tokens"][: orig["prompt_len"]]
            assert att["attack"]["kind"] == "substitute"
            assert att["attack"]["rate"] == pytest.approx(0.2)

    def test_attacked_corpus_still_detectable_at_low_rate(self, tmp_path, capsys):
        src = _generate(tmp_path, texts=3, n=150)
        out = tmp_path / "attacked.jsonl"
        main(["attack", "--kind", "substitute", "--in", str(src), "--rate", "0.1", "--out", str(out)])
        rc = main(["detect", "--in", str(out), "--key", KEY_ARG, "--stat", "sum"])
        assert rc == 0
        assert "TPR=1.0000" in capsys.readouterr().err

    def test_deterministic(self, tmp_path):
        src = _generate(tmp_path, texts=2)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            main(["attack", "--kind", "substitute", "--in", str(src), "--seed", "3", "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()


class TestSpecDec:
    def test_stats_emitted(self, tmp_path):
        out = tmp_path / "sd.jsonl"
        stats_out = tmp_path / "stats.json"
        rc = main(
            [
                "specdec",
                "--draft", MODEL_ARG,
                "--target", MODEL_ARG,
                "--key", KEY_ARG,
                "--scheme", "mc",
                "--n", "80",
                "--texts", "2",
                "--out", str(out),
                "--stats-out", str(stats_out),
            ]
        )
        assert rc == 0
        assert len(_records(out)) == 2
        stats = json.loads(stats_out.read_text())
        assert 0.0 <= stats["rejection_rate"] <= 1.0
        assert stats["n_evaluated"] > 0

    def test_scheme_restricted(self, tmp_path):
        rc = main(
            [
                "specdec",
                "--draft", MODEL_ARG,
                "--target", MODEL_ARG,
                "--key", KEY_ARG,
                "--scheme", "soft",
                "--n", "10",
                "--out", str(tmp_path / "x.jsonl"),
            ]
        )
        assert rc == 2


class TestSimulate:
    def test_power_csv(self, tmp_path):
        out = tmp_path / "power.csv"
        rc = main(
            [
                "simulate",
                "--regime", "weak",
                "--p", "0.2",
                "--q", "0.4",
                "--m", "100,1000",
                "--reps", "1000",
                "--out", str(out),
            ]
        )
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == POWER_CSV_HEADER
        assert len(lines) == 5

    def test_reps_floor_is_usage_error(self, tmp_path):
        rc = main(
            [
                "simulate",
                "--regime", "weak",
                "--p", "0.2",
                "--q", "0.4",
                "--m", "100",
                "--reps", "500",
                "--out", str(tmp_path / "x.csv"),
            ]
        )
        assert rc == 2

    def test_strong_requires_r(self, tmp_path):
        rc = main(
            [
                "simulate",
                "--regime", "strong",
                "--p", "0.3",
                "--m", "100",
                "--reps", "1000",
                "--out", str(tmp_path / "x.csv"),
            ]
        )
        assert rc == 2

    def test_deterministic_csv(self, tmp_path):
        args = [
            "simulate",
            "--regime", "strong",
            "--p", "0.3",
            "--r", "0.5",
            "--m", "100",
            "--reps", "1000",
        ]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main([*args, "--out", str(a)]) == 0
        assert main([*args, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_histogram_output(self, tmp_path):
        hist = tmp_path / "hist.csv"
        rc = main(
            [
                "simulate",
                "--regime", "weak",
                "--p", "0.2",
                "--q", "0.4",
                "--m", "100",
                "--reps", "1000",
                "--out", str(tmp_path / "p.csv"),
                "--histogram", str(hist),
                "--hist-bins", "20",
            ]
        )
        assert rc == 0
        lines = hist.read_text().splitlines()
        assert lines[0].startswith("statistic,bin_lo,bin_hi,null_count")
        assert len(lines) > 20


class TestCalibrate:
    def test_prints_json(self, tmp_path, capsys):
        rc = main(
            [
                "calibrate",
                "--stat", "hc+",
                "--n", "50",
                "--alpha", "0.01",
                "--reps", "1000",
                "--cache-dir", str(tmp_path),
            ]
        )
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["statistic"] == "hc+"
        assert payload["n"] == 50
        assert "critical_value" in payload
        assert payload["cache_dir"] == str(tmp_path)
        assert (tmp_path / "calibrations.csv").exists()


class TestTopLevel:
    def test_unknown_flag(self):
        assert main(["generate", "--frobnicate"]) == 2

    def test_unknown_subcommand(self):
        assert main(["transmogrify"]) == 2

    def test_no_args(self):
        assert main([]) == 2

    def test_console_entry_point(self, tmp_path):
        out = tmp_path / "e.jsonl"
        proc = subprocess.run(
            [
                sys.executable,
                "-m", "wmkit.cli",
                "generate",
                "--model", MODEL_ARG,
                "--key", KEY_ARG,
                "--n", "5",
                "--texts", "1",
                "--out", str(out),
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert out.exists()
