"""End-to-end command-line behaviour on a tiny six-ROI setup."""

import csv
import hashlib
import json
import os

import numpy as np
import pytest

from helpers import grad_config, tiny_atlas
from semantoks.cli import main
from semantoks.config import load_config
from semantoks.dataset import write_atlas


@pytest.fixture
def tiny(tmp_path):
    """Atlas file plus a config whose synthetic data, model and probe all fit in seconds."""
    write_atlas(tiny_atlas((3, 3)), tmp_path / "atlas.json")
    cfg = grad_config(**{
        "data.atlas": str(tmp_path / "atlas.json"),
        "data.synth.n_scans": 15,
        "data.synth.n_timepoints": 24,
        "data.synth.label_networks": (0,),
        "trainer.epochs": 2,
        "trainer.checkpoint_every": 1,
        "eval.n_crops": 2,
        "eval.epochs": 3,
    })
    cfg.save(tmp_path / "cfg.json")
    return tmp_path


def _run(*argv):
    return main([str(a) for a in argv])


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestGenerate:
    def test_manifest_and_determinism(self, tiny):
        assert _run("generate", "--config", tiny / "cfg.json", "--out", tiny / "a") == 0
        assert _run("generate", "--config", tiny / "cfg.json", "--out", tiny / "b") == 0
        man = json.loads((tiny / "a" / "manifest.json").read_text())
        assert len(man) == 15
        assert _digest(tiny / "a" / "manifest.json") == _digest(tiny / "b" / "manifest.json")
        for entry in man:
            name = os.path.basename(entry["path"])
            assert _digest(tiny / "a" / "scans" / name) == _digest(tiny / "b" / "scans" / name)

    def test_seed_flag_changes_data(self, tiny):
        _run("generate", "--config", tiny / "cfg.json", "--out", tiny / "a")
        _run("generate", "--config", tiny / "cfg.json", "--out", tiny / "b", "--seed", 5)
        first = sorted((tiny / "a" / "scans").iterdir())[0].name
        assert _digest(tiny / "a" / "scans" / first) != _digest(tiny / "b" / "scans" / first)

    def test_missing_section(self, tiny, capsys):
        raw = json.loads((tiny / "cfg.json").read_text())
        del raw["objective"]
        (tiny / "bad.json").write_text(json.dumps(raw))
        assert _run("generate", "--config", tiny / "bad.json", "--out", tiny / "a") == 2
        assert "objective" in capsys.readouterr().err

    def test_unknown_key(self, tiny, capsys):
        raw = json.loads((tiny / "cfg.json").read_text())
        raw["trainer"]["learning_rate"] = 1.0
        (tiny / "bad.json").write_text(json.dumps(raw))
        assert _run("generate", "--config", tiny / "bad.json", "--out", tiny / "a") == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_unwritable_out(self, tiny):
        # a directory cannot be created beneath a regular file, even as root
        (tiny / "file").write_text("")
        assert _run("generate", "--config", tiny / "cfg.json", "--out", tiny / "file" / "sub") == 4
        assert _run("generate", "--config", tiny / "cfg.json", "--out", tiny / "file") == 4

    def test_default_configs_load(self):
        root = os.path.join(os.path.dirname(__file__), "..", "configs")
        for name in ("default.json", "toy.json"):
            load_config(os.path.join(root, name))


class TestPipeline:
    def test_full_pipeline(self, tiny, capsys):
        cfg = tiny / "cfg.json"
        assert _run("generate", "--config", cfg, "--out", tiny / "data") == 0
        assert _run("preprocess", "--config", cfg, "--manifest", tiny / "data" / "manifest.json",
                    "--out", tiny / "prep") == 0
        prep = tiny / "prep" / "manifest.json"
        assert _run("pretrain", "--config", cfg, "--manifest", prep, "--out", tiny / "run", "--skip-preprocess") == 0
        # 15 scans // batch 4 = 3 steps per epoch, 2 epochs
        with open(tiny / "run" / "metrics.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 6
        assert (tiny / "run" / "final.bsck").exists()
        meta = json.loads((tiny / "run" / "metrics.meta.json").read_text())
        assert meta["config_hash"] == load_config(cfg).hash()

        ckpt = tiny / "run" / "final.bsck"
        assert _run("probe", "--checkpoint", ckpt, "--manifest", prep, "--out", tiny / "probe",
                    "--skip-preprocess") == 0
        with open(tiny / "probe" / "probe.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6 and sum(int(r["selected"]) for r in rows) == 1

        assert _run("importance", "--checkpoint", ckpt, "--manifest", prep, "--out", tiny / "probe",
                    "--skip-preprocess") == 0
        with open(tiny / "probe" / "importance.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 2

        capsys.readouterr()
        assert _run("inspect", tiny / "run") == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["steps"] == 6
        with open(tiny / "run" / "trajectory.csv") as fh:
            cos = np.array([float(r["token_cosine"]) for r in csv.DictReader(fh)])
        assert len(cos) == 6 and np.all((cos >= -1) & (cos <= 1))

        # resume from the end of epoch 1 reproduces the uninterrupted final checkpoint
        first = _digest(ckpt)
        assert _run("pretrain", "--config", cfg, "--manifest", prep, "--out", tiny / "run",
                    "--skip-preprocess", "--resume", tiny / "run" / "epoch_0001.bsck") == 0
        assert _digest(ckpt) == first

        # a different config needs the explicit override
        other = load_config(cfg)
        other.trainer.epochs = 3
        other.save(tiny / "other.json")
        args = ["pretrain", "--config", tiny / "other.json", "--manifest", prep, "--out", tiny / "run",
                "--skip-preprocess", "--resume", ckpt]
        assert _run(*args) == 2
        with pytest.warns(UserWarning):
            assert _run(*args, "--allow-config-mismatch") == 0

    def test_label_absent(self, tiny, capsys):
        cfg = tiny / "cfg.json"
        _run("generate", "--config", cfg, "--out", tiny / "data")
        _run("pretrain", "--config", cfg, "--manifest", tiny / "data" / "manifest.json", "--out", tiny / "run")
        capsys.readouterr()
        code = _run("probe", "--checkpoint", tiny / "run" / "final.bsck", "--manifest", tiny / "data" / "manifest.json",
                    "--out", tiny / "probe", "--label", "handedness")
        assert code == 2
        assert "handedness" in capsys.readouterr().err

    def test_numeric_failure(self, tiny, capsys):
        cfg = load_config(tiny / "cfg.json")
        cfg.trainer.base_lr = 1e300
        cfg.trainer.epochs = 3
        cfg.save(tiny / "boom.json")
        _run("generate", "--config", tiny / "cfg.json", "--out", tiny / "data")
        code = _run("pretrain", "--config", tiny / "boom.json", "--manifest", tiny / "data" / "manifest.json",
                    "--out", tiny / "run")
        assert code == 3
        assert "numeric failure" in capsys.readouterr().err
        assert not (tiny / "run" / "final.bsck").exists()

    def test_missing_manifest(self, tiny):
        assert _run("pretrain", "--config", tiny / "cfg.json", "--manifest", tiny / "nope.json",
                    "--out", tiny / "run") == 4

    def test_locked_run_dir(self, tiny):
        _run("generate", "--config", tiny / "cfg.json", "--out", tiny / "data")
        (tiny / "run").mkdir()
        (tiny / "run" / "run.lock").write_text("1")
        assert _run("pretrain", "--config", tiny / "cfg.json", "--manifest", tiny / "data" / "manifest.json",
                    "--out", tiny / "run") == 4
