import os

import numpy as np
import pytest

from microsr import data, imgio, model
from microsr.cli import main


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ds") / "d")
    rc = main(["synth", "--out", out, "--count", "10", "--hr-size", "30",
               "--seed", "3"])
    assert rc == 0
    return out


@pytest.fixture(scope="session")
def trained_dir(tmp_path_factory, dataset_dir):
    out = str(tmp_path_factory.mktemp("run") / "t")
    rc = main(["train", "--out", out, "--manifest",
               os.path.join(dataset_dir, "manifest.csv"),
               "--epochs", "4", "--batch-size", "4", "--lr-patch", "12",
               "--a0", "4", "--blocks", "1", "--alpha", "1", "--seed", "3"])
    assert rc == 0
    return out


class TestSynth:
    def test_split_sizes_and_outputs(self, dataset_dir):
        rows = imgio.read_manifest(os.path.join(dataset_dir, "manifest.csv"))
        assert [r["split"] for r in rows] == ["train"] * 8 + ["val", "test"]
        for r in rows:
            lr = imgio.read_image(os.path.join(dataset_dir, r["lr_path"]))
            assert lr.shape == (12, 12, 3)
        assert os.path.exists(os.path.join(dataset_dir, "run_config.txt"))

    def test_same_seed_reproduces_png_bytes(self, dataset_dir, tmp_path):
        again = str(tmp_path / "d2")
        assert main(["synth", "--out", again, "--count", "10",
                     "--hr-size", "30", "--seed", "3"]) == 0
        assert _read(os.path.join(again, "manifest.csv")) == \
               _read(os.path.join(dataset_dir, "manifest.csv"))
        assert _read(os.path.join(again, "lr", "synth-00000.png")) == \
               _read(os.path.join(dataset_dir, "lr", "synth-00000.png"))

    def test_single_pair_is_all_train(self, tmp_path):
        out = str(tmp_path / "one")
        assert main(["synth", "--out", out, "--count", "1", "--hr-size", "30"]) == 0
        rows = imgio.read_manifest(os.path.join(out, "manifest.csv"))
        assert [r["split"] for r in rows] == ["train"]

    def test_missing_required_setting(self, capsys):
        assert main(["synth", "--count", "2"]) == 2
        assert "missing required setting: out" in capsys.readouterr().err


def _register_scene(tmp_path, corrupt_second=False):
    """Scene on disk: LR tiles of a degraded texture plus HR label crops."""
    rng = np.random.default_rng(42)
    hr_big = data.synth_dataset(1, seed=33, hr_size=200)[0].hr.astype(np.float64)
    lr_big = data.synth_degrade(hr_big, psf_sigma=1.0)  # 80x80

    tiles_dir = tmp_path / "tiles"
    tiles_dir.mkdir()
    lines = ["path,row,col"]
    jit = [(0, 0), (1, -2), (-2, 1), (2, 2)]
    for n, (r, c) in enumerate([(0, 0), (0, 28), (28, 0), (28, 28)]):
        imgio.write_image(str(tiles_dir / f"t{n}.png"),
                          lr_big[r : r + 48, c : c + 48])
        lines.append(f"t{n}.png,{r + jit[n][0]},{c + jit[n][1]}")
    tiles_csv = str(tiles_dir / "tiles.csv")
    with open(tiles_csv, "w") as fh:
        fh.write("\n".join(lines) + "\n")

    # labels are exact 2.5x crops: LR (10,10)+30 <-> HR (25,25)+75
    labels = []
    for n, (lr_r, lr_c) in enumerate([(10, 10), (30, 26)]):
        hy, hx = int(lr_r * 2.5), int(lr_c * 2.5)
        crop = hr_big[hy : hy + 75, hx : hx + 75]
        if corrupt_second and n == 1:
            crop = rng.uniform(0, 1, (75, 75, 3))
        path = str(tmp_path / f"label{n}.png")
        imgio.write_image(path, crop)
        labels.append(path)
    return tiles_csv, labels


class TestRegister:
    def test_end_to_end_alignment(self, tmp_path, capsys):
        tiles_csv, labels = _register_scene(tmp_path)
        out = str(tmp_path / "reg")
        rc = main(["register", "--out", out, "--tiles", tiles_csv,
                   "--hr", labels[0], labels[1]])
        assert rc == 0
        rows = imgio.read_manifest(os.path.join(out, "manifest.csv"))
        assert [r["split"] for r in rows] == ["train", "train"]
        lr0 = imgio.read_image(os.path.join(out, rows[0]["lr_path"]))
        hr0 = imgio.read_image(os.path.join(out, rows[0]["hr_path"]))
        assert lr0.shape == (30, 30, 3) and hr0.shape == (75, 75, 3)

        log_lines = open(os.path.join(out, "register_log.csv")).read().splitlines()
        assert log_lines[0] == "pair_id,row,col,peak,rotation,scale,dx,dy"
        for line in log_lines[1:]:
            parts = line.split(",")
            assert float(parts[3]) > 0.9  # crop located confidently
            assert abs(float(parts[4])) < 0.01  # recovered rotation ~ 0
            assert abs(float(parts[5]) - 1.0) < 0.01

    def test_unmatchable_label_fails_run(self, tmp_path, capsys):
        tiles_csv, labels = _register_scene(tmp_path, corrupt_second=True)
        out = str(tmp_path / "reg")
        rc = main(["register", "--out", out, "--tiles", tiles_csv,
                   "--hr", labels[0], labels[1]])
        assert rc == 1
        err = capsys.readouterr().err
        assert "label1" in err
        rows = imgio.read_manifest(os.path.join(out, "manifest.csv"))
        assert len(rows) == 1  # the good label still registered

    def test_missing_tiles_file(self, tmp_path):
        assert main(["register", "--out", str(tmp_path / "o"),
                     "--tiles", str(tmp_path / "none.csv"),
                     "--hr", str(tmp_path / "x.png")]) == 2


class TestTrain:
    def test_outputs_written(self, trained_dir):
        for name in ("checkpoint.bin", "state.npz", "train_log.csv",
                     "run_config.txt"):
            assert os.path.exists(os.path.join(trained_dir, name)), name
        log = open(os.path.join(trained_dir, "train_log.csv")).read().splitlines()
        assert log[0] == "epoch,train_loss,val_loss,wall_seconds"
        assert len(log) == 5
        params = model.load_checkpoint(os.path.join(trained_dir, "checkpoint.bin"))
        assert params.spec.a0 == 4 and params.spec.k == 1

    def test_resume_reproduces_one_shot_run(self, dataset_dir, trained_dir, tmp_path):
        manifest = os.path.join(dataset_dir, "manifest.csv")
        short = str(tmp_path / "short")
        assert main(["train", "--out", short, "--manifest", manifest,
                     "--epochs", "2", "--batch-size", "4", "--lr-patch", "12",
                     "--a0", "4", "--blocks", "1", "--alpha", "1",
                     "--seed", "3"]) == 0
        resumed = str(tmp_path / "resumed")
        assert main(["train", "--out", resumed, "--manifest", manifest,
                     "--epochs", "4", "--batch-size", "4", "--lr-patch", "12",
                     "--a0", "4", "--blocks", "1", "--alpha", "1", "--seed", "3",
                     "--resume", os.path.join(short, "state.npz")]) == 0
        assert _read(os.path.join(resumed, "checkpoint.bin")) == \
               _read(os.path.join(trained_dir, "checkpoint.bin"))

    def test_resume_spec_mismatch(self, dataset_dir, trained_dir, tmp_path, capsys):
        rc = main(["train", "--out", str(tmp_path / "x"),
                   "--manifest", os.path.join(dataset_dir, "manifest.csv"),
                   "--epochs", "3", "--lr-patch", "12", "--a0", "6",
                   "--blocks", "1", "--alpha", "1",
                   "--resume", os.path.join(trained_dir, "state.npz")])
        assert rc == 2
        assert "resume state" in capsys.readouterr().err

    def test_bad_patch_scale_combination(self, dataset_dir, tmp_path):
        rc = main(["train", "--out", str(tmp_path / "x"),
                   "--manifest", os.path.join(dataset_dir, "manifest.csv"),
                   "--lr-patch", "11", "--a0", "4", "--blocks", "1",
                   "--alpha", "1"])
        assert rc == 2


class TestInfer:
    def test_upscales_and_times(self, dataset_dir, trained_dir, tmp_path, capsys):
        out = str(tmp_path / "up.png")
        rc = main(["infer", "--out", out,
                   "--checkpoint", os.path.join(trained_dir, "checkpoint.bin"),
                   "--input", os.path.join(dataset_dir, "lr", "synth-00000.png"),
                   "--repeat", "1"])
        assert rc == 0
        assert imgio.read_image(out).shape == (30, 30, 3)
        assert "wall time per image" in capsys.readouterr().out

    def test_self_feed_compounds_scale(self, dataset_dir, trained_dir, tmp_path):
        out = str(tmp_path / "up2.png")
        rc = main(["infer", "--out", out,
                   "--checkpoint", os.path.join(trained_dir, "checkpoint.bin"),
                   "--input", os.path.join(dataset_dir, "lr", "synth-00000.png"),
                   "--self-feed", "2", "--repeat", "1"])
        assert rc == 0
        assert imgio.read_image(out).shape == (75, 75, 3)

    def test_missing_checkpoint_writes_nothing(self, dataset_dir, tmp_path, capsys):
        out = str(tmp_path / "nope.png")
        rc = main(["infer", "--out", out, "--checkpoint",
                   str(tmp_path / "missing.bin"),
                   "--input", os.path.join(dataset_dir, "lr", "synth-00000.png")])
        assert rc == 2
        assert not os.path.exists(out)


class TestEval:
    def test_writes_ssim_table(self, dataset_dir, trained_dir, tmp_path, capsys):
        out = str(tmp_path / "eval.csv")
        rc = main(["eval", "--out", out,
                   "--checkpoint", os.path.join(trained_dir, "checkpoint.bin"),
                   "--manifest", os.path.join(dataset_dir, "manifest.csv")])
        assert rc == 0
        lines = open(out).read().splitlines()
        assert lines[0] == "pair_id,ssim_network,ssim_bicubic"
        assert len(lines) == 2  # one test pair in the 10-pair dataset
        pid, sn, sb = lines[1].split(",")
        assert pid == "synth-00009"
        assert -1.0 < float(sn) <= 1.0 and -1.0 < float(sb) <= 1.0
        assert "mean ssim" in capsys.readouterr().out

    def test_empty_test_split_is_usage_error(self, trained_dir, tmp_path, capsys):
        out = str(tmp_path / "small")
        assert main(["synth", "--out", out, "--count", "3", "--hr-size", "30"]) == 0
        rc = main(["eval", "--out", str(tmp_path / "e.csv"),
                   "--checkpoint", os.path.join(trained_dir, "checkpoint.bin"),
                   "--manifest", os.path.join(out, "manifest.csv")])
        assert rc == 2
        assert "empty test split" in capsys.readouterr().err


class TestMtf:
    def test_writes_curves(self, trained_dir, tmp_path):
        out = str(tmp_path / "mtf.csv")
        rc = main(["mtf", "--out", out,
                   "--checkpoint", os.path.join(trained_dir, "checkpoint.bin"),
                   "--periods", "8,12", "--line-length", "6", "--margin", "10"])
        assert rc == 0
        lines = open(out).read().splitlines()
        assert lines[0] == "period_cycles_per_mm,input_contrast,output_contrast"
        assert len(lines) == 3
        freqs = [float(l.split(",")[0]) for l in lines[1:]]
        assert freqs == sorted(freqs)
        for line in lines[1:]:
            ci = float(line.split(",")[1])
            assert 0.0 <= ci <= 1.0


class TestConfigAndParsing:
    def test_config_file_merges_and_flags_win(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# synth settings\ncount = 4\nhr-size = 30\nseed = 1\n")
        out = str(tmp_path / "cfgout")
        rc = main(["synth", "--config", str(cfg), "--out", out, "--count", "2"])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "resolved-config synth:" in printed
        assert "count=2" in printed and "hr_size=30" in printed
        rows = imgio.read_manifest(os.path.join(out, "manifest.csv"))
        assert len(rows) == 2

    def test_malformed_config_line(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("what even\n")
        assert main(["synth", "--config", str(cfg), "--out",
                     str(tmp_path / "o"), "--count", "1"]) == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--frobnicate", "1"])
        assert exc.value.code == 2

    def test_bad_threads_value(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "o"), "--count", "1",
                     "--threads", "0"]) == 2
