import shutil

import pytest
import yaml

from anoclick.cli import load_config, main


@pytest.fixture()
def cli_env(toy_paths, tmp_path):
    """Config file pointing at the shared toy dataset."""
    out = tmp_path / "out"
    cfg = {
        "model": {
            "image_size": 64, "residual_dim": 64, "residual_grid": 8,
            "linguistic_dim": 64, "text_dim": 32, "swin_heads": 4,
            "swin_window": 4, "image_patch": 4, "image_dim": 64,
            "image_depth": 2, "image_heads": 4, "pyramid_dim": 32,
            "click_radius": 3,
        },
        "train": {"lr": 2e-3, "steps": 4, "batch_size": 2, "log_every": 2,
                  "max_train_clicks": 2},
        "data": {"root": str(toy_paths.train_root), "layout": "mvtec",
                 "categories": ["weave"]},
        "extractor": {"kind": "toy-conv", "stride": 8, "seed": 0},
        "text_encoder": {"kind": "hash", "seed": 0},
        "corpus": str(toy_paths.corpus_path),
        "output_dir": str(out),
        "seed": 0,
        "eval": {"clicks": [2, 3], "max_clicks": 4},
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, out


class TestConfig:
    def test_overrides_and_env(self, tmp_path, monkeypatch):
        path = tmp_path / "c.yaml"
        path.write_text("a: 1\nnested: {b: 2}\n")
        monkeypatch.setenv("ANOCLICK_SEED", "42")
        cfg = load_config(str(path), ["nested.b=7", "new.key=hello"])
        assert cfg["a"] == 1
        assert cfg["nested"]["b"] == 7
        assert cfg["new"]["key"] == "hello"
        assert cfg["seed"] == 42

    def test_bad_override(self, tmp_path):
        with pytest.raises(ValueError):
            load_config(None, ["novalue"])


class TestCommands:
    def test_unknown_command_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code != 0
        assert "usage" in capsys.readouterr().err.lower()

    def test_build_bank_deterministic(self, cli_env, tmp_path):
        config, out = cli_env
        assert main(["build-bank", "--config", str(config)]) == 0
        first = (out / "banks" / "weave.bank").read_bytes()
        shutil.rmtree(out / "banks")
        assert main(["build-bank", "--config", str(config)]) == 0
        second = (out / "banks" / "weave.bank").read_bytes()
        assert first == second

    def test_missing_dataset_is_single_line_error(self, cli_env, tmp_path, capsys):
        config, out = cli_env
        code = main(["build-bank", "--config", str(config),
                     f"data.root={tmp_path / 'missing'}"])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1
        assert err.startswith("error\t")

    def test_train_then_evaluate_iis(self, cli_env, capsys):
        config, out = cli_env
        assert main(["build-bank", "--config", str(config)]) == 0
        assert main(["train", "--config", str(config)]) == 0
        checkpoint = out / "click" / "checkpoint.pt"
        assert checkpoint.exists()
        assert (out / "click" / "train_log.tsv").exists()
        capsys.readouterr()
        code = main(["evaluate-iis", "--config", str(config),
                     "--checkpoint", str(checkpoint),
                     f"data.root={str(config.parent / 'does_not_matter')}"
                     if False else f"eval.max_clicks=4"])
        assert code == 0
        stdout = capsys.readouterr().out
        table = (out / "results_iis.txt").read_text()
        header = table.splitlines()[0].split("\t")
        assert header == ["method", "2-click", "3-click", "NoC80"]
        row = table.splitlines()[1].split("\t")
        assert row[0] == "weave"
        assert len(row[1].split("/")) == 4  # AP/PRO/P-AUROC/mIoU quadruple
        assert "written:" in stdout

    def test_train_seg_then_evaluate_ad(self, cli_env, capsys):
        config, out = cli_env
        assert main(["build-bank", "--config", str(config)]) == 0
        assert main(["train-seg", "--config", str(config), "train.steps=3"]) == 0
        checkpoint = out / "seg" / "checkpoint.pt"
        assert checkpoint.exists()
        capsys.readouterr()
        code = main(["evaluate-ad", "--config", str(config),
                     "--checkpoint", str(checkpoint)])
        assert code == 0
        table = (out / "results_ad.txt").read_text()
        header = table.splitlines()[0].split("\t")
        assert header == ["method", "AP", "PRO", "P-AUROC", "I-AUROC"]

    def test_export_pseudo_labels(self, cli_env, capsys):
        config, out = cli_env
        assert main(["build-bank", "--config", str(config)]) == 0
        assert main(["train", "--config", str(config), "train.steps=2"]) == 0
        checkpoint = out / "click" / "checkpoint.pt"
        code = main(["export", "--config", str(config),
                     "--checkpoint", str(checkpoint),
                     "eval.export_clicks=2"])
        assert code == 0
        labels = list((out / "labels").glob("*.png"))
        sidecars = list((out / "labels").glob("*.json"))
        assert labels and len(labels) == len(sidecars)
