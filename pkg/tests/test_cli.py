import json

from click.testing import CliRunner

from vivecap.cli import main

from conftest import (
    MockVlmServer,
    build_pipeline_workspace,
    pipeline_responder,
    run_pipeline,
)

PIPELINE_ARTIFACTS = (
    "cluster.json",
    "sample.json",
    "detections.jsonl",
    "captions.jsonl",
    "scorecards.jsonl",
    "scorecards_before.jsonl",
    "grounded.json",
    "grounded.csv",
    "stats.csv",
    "stats.json",
    "sft_train.jsonl",
    "sft_test.jsonl",
    "tables.md",
    "judged.csv",
    "radar.svg",
    "distribution.json",
)


class TestConfigHandling:
    def test_missing_config_exits_2_with_json_stderr(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(main, ["--config", str(tmp_path / "nope.toml"), "cluster"])
        assert result.exit_code == 2
        err = json.loads(result.stderr.strip())
        assert err["error"] == "config"

    def test_invalid_toml_exits_2(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[paths\n")
        result = CliRunner().invoke(main, ["--config", str(bad), "cluster"])
        assert result.exit_code == 2

    def test_missing_required_path_exits_2(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('[paths]\noutput_dir = "%s"\n' % (tmp_path / "out"))
        result = CliRunner().invoke(main, ["--config", str(cfg), "cluster"])
        assert result.exit_code == 2
        assert "embeddings" in json.loads(result.stderr.strip())["detail"]

    def test_stage_failure_exits_3(self, tmp_path):
        ws = build_pipeline_workspace(tmp_path / "ws")
        out = tmp_path / "out"
        # sample before cluster: its input artifact is missing
        result = CliRunner().invoke(
            main, ["--config", str(ws), "--output-dir", str(out), "sample"]
        )
        assert result.exit_code == 3
        assert json.loads(result.stderr.strip())["error"] == "stage"


class TestFullPipeline:
    def test_all_artifacts_produced(self, tmp_path):
        config = build_pipeline_workspace(tmp_path / "ws")
        out = tmp_path / "out"
        out.mkdir()
        with MockVlmServer(pipeline_responder) as server:
            run_pipeline(config, out, server.url)
        for name in PIPELINE_ARTIFACTS:
            assert (out / name).exists(), name

    def test_pipeline_content_sanity(self, tmp_path):
        config = build_pipeline_workspace(tmp_path / "ws")
        out = tmp_path / "out"
        out.mkdir()
        with MockVlmServer(pipeline_responder) as server:
            run_pipeline(config, out, server.url)

        cluster = json.loads((out / "cluster.json").read_text())
        assert cluster["n_clusters"] == 8

        sample = json.loads((out / "sample.json").read_text())
        assert len(sample["clusters"]) == 8

        detections = [json.loads(l) for l in (out / "detections.jsonl").read_text().splitlines()]
        sampled_ids = {entry["frame_id"] for entry in sample["clusters"]}
        assert {d["frame_id"] for d in detections} == sampled_ids

        # the mock detector repeats the gold labels, so grounding is perfect
        grounded = json.loads((out / "grounded.json").read_text())
        assert grounded["aggregate"]["macro_f1"] == 1.0
        assert grounded["aggregate"]["n_examples"] == len(sampled_ids)

        # the mock judge scores improved captions strictly higher
        stats = json.loads((out / "stats.json").read_text())
        by_metric = {row["metric"]: row for row in stats}
        assert by_metric["overall"]["t"] > 0

        train = (out / "sft_train.jsonl").read_text().splitlines()
        test = (out / "sft_test.jsonl").read_text().splitlines()
        assert len(train) + len(test) == 48
        assert len(train) == 38  # round-half-up of 0.8 * 48

    def test_seed_override_changes_sample(self, tmp_path):
        config = build_pipeline_workspace(tmp_path / "ws")
        runner = CliRunner()
        chosen = {}
        for seed in (1, 2):
            out = tmp_path / f"out{seed}"
            out.mkdir()
            base = ["--config", str(config), "--output-dir", str(out), "--seed", str(seed)]
            assert runner.invoke(main, base + ["cluster"]).exit_code == 0
            assert runner.invoke(main, base + ["sample"]).exit_code == 0
            chosen[seed] = json.loads((out / "sample.json").read_text())
        assert chosen[1]["seed"] == 1 and chosen[2]["seed"] == 2
