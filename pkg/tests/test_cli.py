import json
import os

import numpy as np
import pytest

from kvq import kvqt
from kvq.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from kvq.evaluate import read_report
from kvq.export import denormalize_u8, read_pgm, read_sidecar
from kvq.metrics import srcc

TINY_CFG = """\
model.input_size = 4,16,16
model.patch_size = 2,4,4
model.channels = 8
model.depths = 1
model.heads = 2
model.window_size = 1,2,2
model.top_k = 1
model.mlp_ratio = 2
optim.epochs = 1
optim.batch_size = 4
data.train_clips = 8
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == EXIT_OK
    return root, cfg, out


class TestTrain:
    def test_artifacts(self, trained):
        _, _, out = trained
        for name in ("model.kvqt", "model.kvqt.manifest", "train_log.jsonl", "metrics.json", "config.txt"):
            assert (out / name).exists()
        metrics = json.loads((out / "metrics.json").read_text())
        _, meta = kvqt.load_checkpoint(out / "model.kvqt")
        assert metrics["seed"] == 3 and meta["seed"] == "3"
        assert metrics["config_hash"] == meta["config_hash"]
        log = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
        assert all(e["config_hash"] == meta["config_hash"] and e["seed"] == 3 for e in log)

    def test_bad_config_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("model.top_k = 99\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
        assert "top_k" in capsys.readouterr().err

    def test_unknown_flag_exit_2(self):
        assert main(["train", "--bogus"]) == EXIT_USAGE

    def test_missing_out_exit_2(self, trained):
        _, cfg, _ = trained
        assert main(["train", "--config", str(cfg)]) == EXIT_USAGE

    def test_nan_exit_3(self, tmp_path, trained):
        _, cfg, _ = trained
        data = tmp_path / "nan"
        assert main(["synth", "--config", str(cfg), "--out", str(data), "--clips", "4"]) == EXIT_OK
        video = kvqt.load(data / "clip_0000" / "video.kvqt")
        kvqt.save(data / "clip_0000" / "video.kvqt", video * np.nan)
        code = main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")])
        assert code == EXIT_NUMERIC


class TestEval:
    def test_clip_dataset(self, trained, tmp_path):
        root, cfg, out = trained
        data = tmp_path / "clips"
        assert main(["synth", "--config", str(cfg), "--out", str(data), "--clips", "5", "--seed", "8"]) == EXIT_OK
        code = main(["eval", "--checkpoint", str(out / "model.kvqt"), "--data", str(data), "--out", str(tmp_path / "r")])
        assert code == EXIT_OK
        report = read_report(tmp_path / "r" / "report.csv")
        assert report["seed"] == "3"
        assert float(report["sauc"]) >= 0
        samples = [json.loads(x) for x in (tmp_path / "r" / "samples.jsonl").read_text().splitlines()]
        pred, mos = [x["prediction"] for x in samples], [x["mos"] for x in samples]
        assert float(report["srcc"]) == pytest.approx(srcc(pred, mos), abs=1e-12)

    def test_missing_saliency_is_absent(self, trained, tmp_path):
        _, cfg, out = trained
        data = tmp_path / "clips"
        main(["synth", "--config", str(cfg), "--out", str(data), "--clips", "4"])
        os.remove(data / "clip_0001" / "saliency.kvqt")
        code = main(["eval", "--checkpoint", str(out / "model.kvqt"), "--data", str(data), "--out", str(tmp_path / "r")])
        assert code == EXIT_OK
        assert read_report(tmp_path / "r" / "report.csv")["nss"] == "absent"

    def test_region_dataset_needs_matching_input(self, trained, tmp_path):
        _, _, out = trained
        data = tmp_path / "regions"
        assert main(["synth", "--images", "2", "--out", str(data)]) == EXIT_OK
        code = main(["eval", "--checkpoint", str(out / "model.kvqt"), "--data", str(data), "--out", str(tmp_path / "r")])
        assert code == EXIT_OK
        report = read_report(tmp_path / "r" / "report.csv")
        assert "intra_srcc" in report and "inter_srcc" in report

    def test_bad_csv_exit_2(self, trained, tmp_path):
        _, _, out = trained
        data = tmp_path / "regions"
        main(["synth", "--images", "1", "--out", str(data)])
        csv = data / "lpvq.csv"
        lines = csv.read_text().splitlines()
        csv.write_text("\n".join(lines[:-1]) + "\n")
        code = main(["eval", "--checkpoint", str(out / "model.kvqt"), "--data", str(data), "--out", str(tmp_path / "r")])
        assert code == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "x"), "--data", str(tmp_path)]) == EXIT_USAGE


class TestMaps:
    def test_image_input(self, trained, tmp_path, rng):
        _, _, out = trained
        img = tmp_path / "img.kvqt"
        kvqt.save(img, rng.uniform(size=(16, 16, 3)))
        maps = tmp_path / "maps"
        assert main(["maps", "--checkpoint", str(out / "model.kvqt"), "--data", str(img), "--out", str(maps)]) == EXIT_OK
        for name in ("saliency", "texture", "patch_texture", "texture_gap"):
            values = kvqt.load(maps / f"{name}.kvqt")
            assert values.shape == (2, 4, 4)
            side = read_sidecar(maps / f"{name}.norm.txt")
            step = (side["max"] - side["min"]) / 255
            for f in range(values.shape[0]):
                pgm = read_pgm(maps / f"{name}_f{f:03d}.pgm")
                assert pgm.shape == values.shape[1:]
                assert np.abs(denormalize_u8(pgm, side["min"], side["max"]) - values[f]).max() <= step + 1e-12
        texture = kvqt.load(maps / "texture.kvqt")
        np.testing.assert_allclose(texture[0], texture[1], atol=1e-12)
        lines = (maps / "routing.csv").read_text().splitlines()
        assert lines[0].startswith("block_id")

    def test_clip_directory_input(self, trained, tmp_path):
        _, cfg, out = trained
        data = tmp_path / "clips"
        main(["synth", "--config", str(cfg), "--out", str(data), "--clips", "1"])
        code = main(["maps", "--checkpoint", str(out / "model.kvqt"), "--data", str(data / "clip_0000"),
                     "--out", str(tmp_path / "m")])
        assert code == EXIT_OK

    def test_bad_input_shape(self, trained, tmp_path):
        _, _, out = trained
        bad = tmp_path / "bad.kvqt"
        kvqt.save(bad, np.zeros((4, 4)))
        assert main(["maps", "--checkpoint", str(out / "model.kvqt"), "--data", str(bad),
                     "--out", str(tmp_path / "m")]) == EXIT_USAGE


class TestCheck:
    def test_mutated_gradient_is_named(self, monkeypatch, capsys):
        from kvq import tensor as T

        original = T.exp

        def wrong_exp(x):
            out = original(x)
            backward = out._backward
            out._backward = lambda g: tuple(-v for v in backward(g))
            return out

        monkeypatch.setattr(T, "exp", wrong_exp)
        assert main(["check", "--seeds", "2"]) == EXIT_VERIFY
        assert "FAIL gradients/exp" in capsys.readouterr().out
