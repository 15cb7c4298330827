import json
import subprocess
import sys

import numpy as np
import pytest

from diffproj.cli import main

SMALL = {
    "dataset": {"n_samples": 300},
    "training": {"hidden": [8]},
    "epochs": 2,
    "seeds": [0],
}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_gen_train_eval(tmp_path, capsys):
    cfg = write(tmp_path / "gen.json", SMALL)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    assert (tmp_path / "data" / "dataset.bin").is_file()
    meta = json.loads((tmp_path / "data" / "dataset.json").read_text())
    assert meta["N"] == 300 and meta["n_test"] == 60

    train_cfg = write(tmp_path / "train.json", {**SMALL, "dataset_path": "data/dataset.bin"})
    assert main(["train", "--config", train_cfg, "--out", str(tmp_path / "model")]) == 0
    hist = json.loads((tmp_path / "model" / "history.json").read_text())
    assert len(hist["history"]["loss"]) == 2

    eval_cfg = write(
        tmp_path / "eval.json",
        {**SMALL, "dataset_path": "data/dataset.bin", "model_path": "model/model.bin"},
    )
    assert main(["eval", "--config", eval_cfg, "--out", str(tmp_path / "eval")]) == 0
    doc = json.loads((tmp_path / "eval" / "eval.json").read_text())
    assert doc["projected_violation"] <= doc["raw_violation"]


def test_project_exact(tmp_path, capsys):
    cfg = write(
        tmp_path / "p.json",
        {
            "constraints": {
                "m": 2,
                "M": 4,
                "rows": [
                    {"a": [1, 0], "b": 1, "kind": "inequality"},
                    {"a": [-1, 0], "b": 0, "kind": "inequality"},
                    {"a": [0, 1], "b": 1, "kind": "inequality"},
                    {"a": [0, -1], "b": 0, "kind": "inequality"},
                ],
            },
            "point": [2.0, 2.0],
            "config": {"layers": 50},
        },
    )
    assert main(["project", "--config", cfg, "--out", str(tmp_path), "--exact"]) == 0
    doc = json.loads((tmp_path / "projection.json").read_text())
    np.testing.assert_allclose(doc["exact"]["point"], [1.0, 1.0])
    assert doc["exact"]["gap"] < 1e-6
    assert "gap" in capsys.readouterr().out


@pytest.mark.parametrize(
    "command,files",
    [
        ("compare", ["compare.csv", "compare.json"]),
        ("ablate-layers", ["layer_ablation.csv"]),
        ("ablate-alpha", ["alpha_ablation.csv"]),
        ("sweep-constraints", ["constraint_sweep.csv"]),
        ("seg-demo", ["seg_demo.csv", "seg_demo.json"]),
    ],
)
def test_experiment_commands(tmp_path, command, files):
    doc = {
        **SMALL,
        "layer_values": [0, 1],
        "alpha_values": [0.5],
        "constraint_counts": [3],
        "seg": {"n_images": 3, "n_train_images": 10, "epochs": 1},
    }
    cfg = write(tmp_path / "c.json", doc)
    assert main([command, "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    for name in files:
        assert (tmp_path / "out" / name).is_file()


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = write(tmp_path / "c.json", {**SMALL, "out": str(tmp_path / "from_cfg")})
    monkeypatch.setenv("DIFFPROJ_OUTPUT_DIR", str(tmp_path / "from_env"))
    assert main(["gen-data", "--config", cfg]) == 0
    assert (tmp_path / "from_env" / "dataset.bin").is_file()
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "dataset.bin").is_file()
    monkeypatch.delenv("DIFFPROJ_OUTPUT_DIR")
    assert main(["gen-data", "--config", cfg]) == 0
    assert (tmp_path / "from_cfg" / "dataset.bin").is_file()


def test_seed_and_epoch_overrides(tmp_path):
    cfg = write(tmp_path / "c.json", SMALL)
    assert main(["compare", "--config", cfg, "--out", str(tmp_path), "--seed", "7", "--epochs", "1"]) == 0
    doc = json.loads((tmp_path / "compare.json").read_text())
    assert doc["config"]["seeds"] == [7] and doc["config"]["epochs"] == 1


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["compare", "--config", str(tmp_path / "none.json")]) == 1

    def test_no_subcommand(self):
        assert main([]) == 1

    def test_unknown_subcommand(self):
        assert main(["frobnicate", "--config", "x"]) == 1

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert main(["compare", "--config", str(tmp_path / "c.json")]) == 1

    def test_unknown_key(self, tmp_path):
        cfg = write(tmp_path / "c.json", {"epoch": 3})
        assert main(["compare", "--config", cfg, "--out", str(tmp_path)]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_numerical(self, tmp_path):
        cfg = write(tmp_path / "c.json", {**SMALL, "training": {"hidden": [8], "learning_rate": 1e200}})
        assert main(["compare", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "diffproj", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("gen-data", "train", "eval", "project", "compare", "ablate-layers", "ablate-alpha",
                 "sweep-constraints", "seg-demo"):
        assert name in proc.stdout


def test_shipped_configs_parse():
    from pathlib import Path

    from diffproj.experiments import ExperimentSpec

    root = Path(__file__).resolve().parent.parent / "configs"
    for name in ("compare.json", "quick.json"):
        ExperimentSpec.from_dict(json.loads((root / name).read_text()))
    assert ExperimentSpec.from_dict(json.loads((root / "compare.json").read_text())) == ExperimentSpec()
