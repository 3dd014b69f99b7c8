import json

import pytest

from tireid.cli import main


def run_cli(args):
    """Invoke the CLI entry point; return (exit_code)."""
    try:
        code = main(list(args))
    except SystemExit as exc:
        return int(exc.code or 0)
    return code or 0


@pytest.fixture
def bench_dir(tmp_path):
    out = tmp_path / "bench"
    code = run_cli([
        "simgen", "--num-identities", "12", "--images-per-identity", "2",
        "--texts-per-identity", "1", "--dim", "16", "--noise-sigma", "0.0",
        "--seed", "9", "--out", str(out),
    ])
    assert code == 0
    return out


def common_inputs(bench_dir):
    return [
        "--annotations", str(bench_dir / "annotations.json"),
        "--image-embeddings", str(bench_dir / "images.icle"),
        "--text-embeddings", str(bench_dir / "texts.icle"),
    ]


class TestBasicCommands:
    def test_simgen_outputs_exist(self, bench_dir):
        for name in ("annotations.json", "images.icle", "texts.icle"):
            assert (bench_dir / name).exists()

    def test_simgen_requires_seed(self, tmp_path, capsys):
        code = run_cli(["simgen", "--out", str(tmp_path / "x")])
        assert code == 1
        assert "error[validation]" in capsys.readouterr().err

    def test_ingest_reports_counts(self, bench_dir, tmp_path, capsys):
        out = tmp_path / "ingest"
        code = run_cli(["ingest", *common_inputs(bench_dir), "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["images"] == 24 and manifest["texts"] == 12

    def test_zero_noise_pipeline_rank1_perfect(self, bench_dir, tmp_path):
        rdir = tmp_path / "r"
        assert run_cli(["retrieve", *common_inputs(bench_dir), "--out", str(rdir)]) == 0
        edir = tmp_path / "e"
        assert run_cli([
            "evaluate", "--rankings", str(rdir / "rankings.jsonl"),
            "--annotations", str(bench_dir / "annotations.json"),
            "--out", str(edir),
        ]) == 0
        report = json.loads((edir / "report.json").read_text())
        assert report["rank1"] == 1.0
        assert (edir / "report.png").exists()

    def test_stats_writes_csv_and_figure(self, bench_dir, tmp_path):
        rdir = tmp_path / "r"
        run_cli(["retrieve", *common_inputs(bench_dir), "--out", str(rdir)])
        sdir = tmp_path / "s"
        code = run_cli([
            "stats", "--rankings", str(rdir / "rankings.jsonl"),
            "--annotations", str(bench_dir / "annotations.json"),
            "--bins", "10", "--out", str(sdir),
        ])
        assert code == 0
        lines = (sdir / "histogram.csv").read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,correct,incorrect"
        assert len(lines) == 11
        counts = [sum(map(int, line.split(",")[2:])) for line in lines[1:]]
        assert sum(counts) == 12
        assert (sdir / "histogram.png").exists()

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "run.toml"
        cfg.write_text("[thi]\nbogus = 1\n")
        code = run_cli(["retrieve", "--config", str(cfg)])
        assert code == 1
        assert "unknown keys" in capsys.readouterr().err

    def test_missing_input_is_validation_error(self, capsys):
        code = run_cli(["retrieve"])
        assert code == 1
        assert "error[validation]" in capsys.readouterr().err

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        code = run_cli([
            "retrieve", "--annotations", str(tmp_path / "none.json"),
            "--image-embeddings", str(tmp_path / "none.icle"),
            "--text-embeddings", str(tmp_path / "none2.icle"),
            "--out", str(tmp_path / "o"),
        ])
        assert code == 2
        assert "error[runtime]" in capsys.readouterr().err


class TestInteractCommand:
    def test_lambda_one_before_equals_after(self, bench_dir, tmp_path):
        out = tmp_path / "thi"
        code = run_cli([
            "interact", *common_inputs(bench_dir),
            "--backend", "simulated", "--p", "1.0", "--beta", "0.5",
            "--lambda", "1.0", "--xi", "median", "--rounds", "3",
            "--seed", "4", "--out", str(out),
        ])
        assert code == 0
        before = (out / "report_before.json").read_bytes()
        after = (out / "report_after.json").read_bytes()
        assert before == after
        assert (out / "comparison.png").exists()
        assert (out / "trace.jsonl").exists()
        assert (out / "reranked.jsonl").exists()

    def test_idempotent_given_seed(self, bench_dir, tmp_path):
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = run_cli([
                "interact", *common_inputs(bench_dir),
                "--backend", "simulated", "--p", "0.7", "--beta", "0.4",
                "--lambda", "0.8", "--xi", "0.5", "--rounds", "4",
                "--seed", "12", "--out", str(out),
            ])
            assert code == 0
            blobs.append(tuple(
                (out / f).read_bytes()
                for f in ("reranked.jsonl", "trace.jsonl", "report_after.json")
            ))
        assert blobs[0] == blobs[1]

    def test_config_file_with_flag_override(self, bench_dir, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(
            "seed = 3\n"
            "[thi]\nrounds = 2\nxi = 0.5\n'lambda' = 0.8\n"
            "[oracle]\nbackend = 'simulated'\np = 1.0\nbeta = 0.5\n"
        )
        out = tmp_path / "o"
        code = run_cli([
            "interact", *common_inputs(bench_dir), "--config", str(cfg),
            "--lambda", "1.0", "--out", str(out),
        ])
        assert code == 0
        # the flag override (lambda=1) forces before == after
        assert (out / "report_before.json").read_bytes() == (
            out / "report_after.json"
        ).read_bytes()

    def test_scripted_backend_needs_script(self, bench_dir, tmp_path, capsys):
        code = run_cli([
            "interact", *common_inputs(bench_dir),
            "--backend", "scripted", "--seed", "1",
            "--out", str(tmp_path / "x"),
        ])
        assert code == 1
        assert "script" in capsys.readouterr().err


class TestAugmentAndSft:
    def test_augment_scripted(self, bench_dir, tmp_path):
        # script for 12 texts, m=1: vqa, aggregate, decompose per text
        script = []
        for i in range(12):
            script += ["1. an answer", f"enriched {i}.", f"1. enriched {i}."]
        spath = tmp_path / "script.json"
        spath.write_text(json.dumps(script))
        out = tmp_path / "aug"
        code = run_cli([
            "augment", "--annotations", str(bench_dir / "annotations.json"),
            "--backend", "scripted", "--script", str(spath),
            "--m", "1", "--per-text-count", "1", "--seed", "2",
            "--out", str(out),
        ])
        assert code == 0
        lines = (out / "augmented.jsonl").read_text().strip().splitlines()
        assert len(lines) == 24  # 12 originals + 1 augmentation each
        rows = [json.loads(l) for l in lines]
        assert all("person_id" in r for r in rows)

    def test_augment_rejects_simulated(self, bench_dir, tmp_path, capsys):
        code = run_cli([
            "augment", "--annotations", str(bench_dir / "annotations.json"),
            "--backend", "simulated", "--seed", "2", "--out", str(tmp_path / "x"),
        ])
        assert code == 1  # click.Choice rejection is a validation error
        assert "not one of" in capsys.readouterr().err
        assert run_cli([
            "augment", "--annotations", str(bench_dir / "annotations.json"),
            "--seed", "2", "--out", str(tmp_path / "y"),
        ]) == 1  # default scripted without --script

    def test_sft_export_validates(self, bench_dir, tmp_path):
        rdir = tmp_path / "r"
        run_cli(["retrieve", *common_inputs(bench_dir), "--out", str(rdir)])
        out = tmp_path / "sft"
        code = run_cli([
            "sft-export", "--annotations", str(bench_dir / "annotations.json"),
            "--rankings", str(rdir / "rankings.jsonl"),
            "--n-l", "5", "--seed", "3", "--out", str(out),
        ])
        assert code == 0
        from tireid.augment import validate_sft_export

        yes, no = validate_sft_export(out / "sft.json")
        assert yes == 5
        assert no <= 50


class TestGoldenPipeline:
    """End-to-end CLI run on the pinned desk benchmark, byte-for-byte."""

    PARAMS = ["--num-identities", "200", "--images-per-identity", "2",
              "--texts-per-identity", "1", "--dim", "64", "--noise-sigma", "0.6",
              "--seed", "42"]

    def test_reports_reproduce_frozen_bytes(self, tmp_path):
        from .conftest import golden_check

        bench = tmp_path / "bench"
        assert run_cli(["simgen", *self.PARAMS, "--out", str(bench)]) == 0
        inputs = common_inputs(bench)
        rdir = tmp_path / "r"
        assert run_cli(["retrieve", *inputs, "--out", str(rdir)]) == 0
        edir = tmp_path / "e"
        assert run_cli([
            "evaluate", "--rankings", str(rdir / "rankings.jsonl"),
            "--annotations", str(bench / "annotations.json"), "--out", str(edir),
        ]) == 0
        golden_check("cli_eval_report.json",
                     (edir / "report.json").read_text(encoding="utf-8"))
        idir = tmp_path / "i"
        assert run_cli([
            "interact", *inputs, "--backend", "simulated",
            "--p", "1.0", "--beta", "0.6", "--lambda", "0.8", "--xi", "median",
            "--rounds", "5", "--seed", "42", "--out", str(idir),
        ]) == 0
        golden_check("cli_report_after.json",
                     (idir / "report_after.json").read_text(encoding="utf-8"))
        golden_check("cli_trace_head.jsonl", "".join(
            (idir / "trace.jsonl").read_text(encoding="utf-8").splitlines(True)[:5]
        ))


def test_help_exits_zero(capsys):
    assert run_cli(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("simgen", "ingest", "retrieve", "evaluate", "interact", "stats",
                "augment", "sft-export"):
        assert cmd in out
