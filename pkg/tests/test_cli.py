"""Command-line interface: exit codes, outputs, cross-command agreement."""

import json
import math
import subprocess
import sys

import numpy as np
import pytest

from gmconv.checkpoint import checkpoint_from_model, load_checkpoint, restore_model, save_checkpoint
from gmconv.cli import main
from gmconv.data import load_dataset
from gmconv.masks import read_grid_csv
from gmconv.models import ConvPolicy, Model, apply_policy, build_model
from gmconv.tensor import Tensor
from gmconv.train import TrainConfig, config_to_json, split_source

TINY = TrainConfig(
    model="cnn-small",
    num_classes=10,
    width=1.0,
    policy=ConvPolicy("static", "static"),
    dataset="synthetic",
    train_subset=64,
    test_subset=32,
    image_shape=(3, 32, 32),
    epochs=1,
    batch_size=32,
    lr=0.05,
    momentum=0.9,
    weight_decay=1e-4,
    seed=3,
)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny CLI training run shared by the checkpoint-consuming tests."""
    root = tmp_path_factory.mktemp("run")
    cfg_path = root / "config.json"
    cfg_path.write_text(config_to_json(TINY))
    out_dir = root / "out"
    rc = main(["train", "--config", str(cfg_path), "--out", str(out_dir)])
    assert rc == 0
    return {"config": str(cfg_path), "out": str(out_dir), "ckpt": str(out_dir / "last.ckpt")}


class TestMaskGen:
    def test_stdout_matches_literal_gaussian(self, capsys):
        """sigma=1, k=3: independent two-step evaluation of the normalized
        Gaussian, compared against the emitted CSV."""
        assert main(["mask-gen", "--sigma", "1", "--k", "3"]) == 0
        got = np.array([
            [float(v) for v in line.split(",")]
            for line in capsys.readouterr().out.strip().split("\n")
        ])
        lit = np.empty((3, 3))
        for r in range(3):
            for c in range(3):
                d2 = (r - 1.0) ** 2 + (c - 1.0) ** 2
                lit[r, c] = math.exp(-d2 / 2.0)
        lit /= lit.max()
        np.testing.assert_allclose(got, lit, rtol=0, atol=1e-12)
        assert got[1, 1] == 1.0

    def test_csv_file_roundtrip(self, tmp_path):
        out = tmp_path / "m.csv"
        assert main(["mask-gen", "--sigma", "2", "--k", "5", "--out", str(out)]) == 0
        grid = read_grid_csv(str(out))
        assert grid.shape == (5, 5)
        assert grid[2, 2] == 1.0

    def test_pgm_by_extension(self, tmp_path):
        out = tmp_path / "m.pgm"
        assert main(["mask-gen", "--sigma", "1", "--k", "3", "--out", str(out)]) == 0
        text = out.read_text()
        assert text.startswith("P2")
        assert "65535" in text

    def test_elliptic_when_sigma2_given(self, capsys):
        assert main(["mask-gen", "--sigma", "1", "--sigma2", "2", "--k", "3"]) == 0
        grid = np.array([
            [float(v) for v in line.split(",")]
            for line in capsys.readouterr().out.strip().split("\n")
        ])
        assert grid[1, 0] != grid[0, 1]  # anisotropic axes

    def test_bad_kernel_size(self, capsys):
        assert main(["mask-gen", "--sigma", "1", "--k", "0"]) == 2


class TestUsageErrors:
    def test_unknown_flag_exits_2_with_usage(self, capsys):
        rc = main(["mask-gen", "--sigma", "1", "--k", "3", "--frobnicate"])
        assert rc == 2
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand_exits_2(self, capsys):
        assert main([]) == 2

    def test_unknown_subcommand_exits_2(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0
        assert "train" in capsys.readouterr().out

    def test_console_entry_point_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "gmconv.cli", "mask-gen", "--sigma", "1", "--k", "3"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert len(proc.stdout.strip().split("\n")) == 3


class TestTrainCommand:
    def test_writes_metrics_and_checkpoint(self, trained, capsys):
        out = trained["out"]
        metrics = open(out + "/metrics.csv").read()
        assert metrics.startswith("epoch,train_loss,test_acc,sigma_0")
        assert load_checkpoint(trained["ckpt"]).epoch == 1

    def test_stdout_is_the_metrics_csv(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(config_to_json(TINY))
        assert main(["train", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        lines = out.strip().split("\n")
        assert lines[0].startswith("epoch,train_loss,test_acc")
        assert len(lines) == 2  # header + 1 epoch

    def test_seed_override_changes_the_run(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(config_to_json(TINY))
        assert main(["train", "--config", str(cfg), "--seed", "99"]) == 0
        with_99 = capsys.readouterr().out
        assert main(["train", "--config", str(cfg)]) == 0
        with_cfg_seed = capsys.readouterr().out
        assert with_99 != with_cfg_seed

    def test_missing_dataset_exits_3(self, tmp_path, capsys):
        cfg_obj = TrainConfig(
            dataset="cifar10-bin", data_root=str(tmp_path / "nowhere"),
            model="cnn-small", width=1.0, train_subset=8, test_subset=8,
            epochs=1, batch_size=8,
        )
        cfg = tmp_path / "c.json"
        cfg.write_text(config_to_json(cfg_obj))
        assert main(["train", "--config", str(cfg)]) == 3
        assert "error" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == 2

    def test_invalid_config_json_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("{broken")
        assert main(["train", "--config", str(cfg)]) == 2

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"optimzer": "sgd"}')
        assert main(["train", "--config", str(cfg)]) == 2
        assert "optimzer" in capsys.readouterr().err


class TestEvalCommand:
    def test_accuracy_matches_training_log(self, trained, capsys):
        rc = main([
            "eval", "--ckpt", trained["ckpt"], "--dataset", "synthetic",
            "--split", "test", "--subset", str(TINY.test_subset),
            "--seed", str(TINY.seed),
        ])
        assert rc == 0
        printed = capsys.readouterr().out.strip()
        assert printed.startswith("accuracy ")
        acc = float(printed.split()[1])
        last_row = open(trained["out"] + "/metrics.csv").read().strip().split("\n")[-1]
        assert acc == float(last_row.split(",")[2])

    def test_missing_checkpoint_exits_3(self, tmp_path, capsys):
        assert main(["eval", "--ckpt", str(tmp_path / "no.ckpt")]) == 3

    def test_mean_without_std_exits_2(self, trained, capsys):
        rc = main([
            "eval", "--ckpt", trained["ckpt"], "--dataset", "synthetic",
            "--mean", "0.5,0.5,0.5",
        ])
        assert rc == 2


class TestFoldCommand:
    def test_fold_then_eval_is_bit_identical(self, trained, tmp_path, capsys):
        folded_path = str(tmp_path / "folded.ckpt")
        assert main(["fold", "--ckpt", trained["ckpt"], "--out", folded_path]) == 0
        assert "folded 4" in capsys.readouterr().out

        args = ["--dataset", "synthetic", "--split", "test",
                "--subset", str(TINY.test_subset), "--seed", str(TINY.seed)]
        assert main(["eval", "--ckpt", trained["ckpt"]] + args) == 0
        live_line = capsys.readouterr().out
        assert main(["eval", "--ckpt", folded_path] + args) == 0
        folded_line = capsys.readouterr().out
        assert live_line == folded_line

        # prediction labels, not just the accuracy, agree bit for bit
        live = restore_model(load_checkpoint(trained["ckpt"]))
        cold = restore_model(load_checkpoint(folded_path))
        images, _ = load_dataset(split_source(TINY, "test"))
        np.testing.assert_array_equal(
            live.predict(Tensor(images)), cold.predict(Tensor(images))
        )

    def test_fold_of_plain_model_folds_nothing(self, tmp_path, capsys):
        spec = apply_policy(build_model("cnn-small", 10), ConvPolicy("std", "std"))
        model = Model(spec, np.random.default_rng(0))
        src = str(tmp_path / "plain.ckpt")
        save_checkpoint(checkpoint_from_model(model), src)
        assert main(["fold", "--ckpt", src, "--out", str(tmp_path / "f.ckpt")]) == 0
        assert "folded 0" in capsys.readouterr().out

    def test_missing_checkpoint_exits_3(self, tmp_path):
        rc = main(["fold", "--ckpt", str(tmp_path / "no.ckpt"),
                   "--out", str(tmp_path / "o.ckpt")])
        assert rc == 3


class TestErfCommand:
    def test_writes_map_and_radius(self, trained, tmp_path, capsys):
        out = tmp_path / "erf"
        rc = main(["erf", "--ckpt", trained["ckpt"], "--layer", "6",
                   "--samples", "4", "--out", str(out), "--seed", "1"])
        assert rc == 0
        printed = capsys.readouterr().out
        assert printed.startswith("erf_radius ")
        radius = float(printed.split()[1])
        assert radius > 0
        grid = read_grid_csv(str(out / "erf_layer6.csv"))
        assert grid.shape == (32, 32)
        assert grid.max() == 1.0
        meta = json.loads((out / "erf_layer6.json").read_text())
        assert meta["radius"] == radius
        assert (out / "erf_layer6.pgm").exists()

    def test_bad_layer_index_exits_2(self, trained, tmp_path, capsys):
        rc = main(["erf", "--ckpt", trained["ckpt"], "--layer", "99",
                   "--samples", "2", "--out", str(tmp_path / "x")])
        assert rc == 2


class TestMaskDumpCommand:
    def test_dumps_every_masked_layer(self, trained, tmp_path, capsys):
        out = tmp_path / "masks"
        assert main(["mask-dump", "--ckpt", trained["ckpt"], "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["layers"]) == 4
        for entry in manifest["layers"]:
            assert (out / entry["csv"]).exists()
            assert (out / entry["pgm"]).exists()
