"""
Tests for the defletter command line (src.pipeline.cli).
"""

import numpy as np
import pandas as pd
import pytest

from src.attack.attack_log import save_attack_log
from src.attack.ifgsm import AttackConfig, attack_dataset
from src.classifier.checkpoint import save_classifier
from src.errors import EmptySplit, StaleArtifact
from src.glyphs.storage import load_dataset, save_dataset
from src.pipeline.cli import EXIT_FAILURE, EXIT_OK, EXIT_STALE, EXIT_USAGE, build_parser, main


class TestParser:
    def test_verbs(self):
        parser = build_parser()
        args = parser.parse_args(["attack", "--model", "m.pt", "--dataset", "d.bin",
                                  "--out", "log.jsonl"])
        assert args.epsilon == 0.02
        assert args.k_max == 100
        assert args.split == "test"

    def test_global_flags(self):
        args = build_parser().parse_args(["--no-progress", "report", "--out", "runs/x"])
        assert args.progress is False

    def test_stage_names(self):
        args = build_parser().parse_args(["stage", "gan-step2", "--config", "c.toml"])
        assert args.name == "gan-step2"


class TestExitCodes:
    def test_no_verb_is_usage_error(self, capsys):
        assert main([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_unknown_verb(self):
        assert main(["teleport"]) == EXIT_USAGE

    def test_bad_flag_value(self):
        assert main(["attack", "--model", "m", "--dataset", "d", "--out", "o",
                     "--epsilon", "lots"]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "missing.toml")]) == EXIT_USAGE

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[dataset]\nfont_dir = "a"\npng_dir = "b"\n')
        assert main(["run", "--config", str(path)]) == EXIT_USAGE

    def test_missing_upstream_is_failure(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('out_dir = "out"\n[dataset]\nfont_dir = "fonts"\n')
        assert main(["stage", "attack", "--config", str(path)]) == EXIT_FAILURE

    def test_stale_artifact(self, tmp_path, mocker):
        path = tmp_path / "c.toml"
        path.write_text('[dataset]\nfont_dir = "fonts"\n')
        mocker.patch("src.pipeline.cli.run_stage", side_effect=StaleArtifact("changed"))
        assert main(["stage", "attack", "--config", str(path)]) == EXIT_STALE

    def test_toolkit_error_is_failure(self, tmp_path, mocker):
        path = tmp_path / "c.toml"
        path.write_text('[dataset]\nfont_dir = "fonts"\n')
        mocker.patch("src.pipeline.cli.run_all", side_effect=EmptySplit("no val"))
        assert main(["run", "--config", str(path)]) == EXIT_FAILURE

    def test_run_passes_options(self, tmp_path, mocker):
        path = tmp_path / "c.toml"
        path.write_text('[dataset]\nfont_dir = "fonts"\n')
        run_all = mocker.patch("src.pipeline.cli.run_all")
        assert main(["--no-progress", "run", "--config", str(path), "--seed", "7",
                     "--force", "--only", "dataset", "classifier"]) == EXIT_OK
        config = run_all.call_args.args[0]
        assert config.seed == 7 and config.classifier.seed == 7
        assert run_all.call_args.kwargs == {"force": True, "progress": False,
                                            "stages": ["dataset", "classifier"]}

    def test_report_without_artifacts(self, tmp_path):
        assert main(["report", "--out", str(tmp_path)]) == EXIT_FAILURE

    def test_help_exits_cleanly(self):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0


class TestVerbs:
    def test_build_dataset(self, font_dir, tmp_path, capsys):
        out = tmp_path / "ds.bin"
        code = main(["--no-progress", "build-dataset", "--fonts", str(font_dir),
                     "--out", str(out), "--ratios", "0.5", "0.1", "0.4", "--seed", "2"])
        assert code == EXIT_OK
        ds = load_dataset(out)
        assert len(ds) == 260
        assert ds.checksum() in capsys.readouterr().out

    def test_build_dataset_needs_a_source(self, tmp_path):
        assert main(["build-dataset", "--out", str(tmp_path / "ds.bin")]) == EXIT_USAGE

    def test_analyze_missing_log(self, tmp_path):
        code = main(["analyze", "--log", str(tmp_path / "none.jsonl"), "--model", "m.pt",
                     "--out", str(tmp_path / "analysis")])
        assert code == EXIT_FAILURE


@pytest.fixture
def attacked_files(tiny_classifier, synthetic_dataset, tmp_path):
    """Classifier checkpoint, dataset file and attack log on the synthetic letters."""
    model_path, ds_path, log_path = tmp_path / "clf.pt", tmp_path / "ds.bin", tmp_path / "log.jsonl"
    save_classifier(tiny_classifier, model_path)
    save_dataset(synthetic_dataset, ds_path)
    log = attack_dataset(tiny_classifier, synthetic_dataset, "test", AttackConfig(k_max=50),
                         progress=False)
    save_attack_log(log, log_path)
    return model_path, ds_path, log_path


class TestAnalyzeVerb:
    def test_accuracy_comes_from_the_checkpoint(self, attacked_files, tmp_path):
        model_path, _, log_path = attacked_files
        out = tmp_path / "analysis"
        code = main(["analyze", "--log", str(log_path), "--model", str(model_path),
                     "--out", str(out)])
        assert code == EXIT_OK
        summary = pd.read_csv(out / "class_summary.csv")
        assert len(summary) > 0
        assert np.isfinite(summary["accuracy"]).all()
        assert not (out / "attack_examples.png").exists()

    def test_dataset_adds_attack_figures(self, attacked_files, tmp_path):
        model_path, ds_path, log_path = attacked_files
        out = tmp_path / "analysis"
        code = main(["analyze", "--log", str(log_path), "--model", str(model_path),
                     "--dataset", str(ds_path), "--out", str(out)])
        assert code == EXIT_OK
        assert np.isfinite(pd.read_csv(out / "class_summary.csv")["accuracy"]).all()
        assert (out / "attack_examples.png").is_file()
        assert (out / "attack_sequence.png").is_file()
