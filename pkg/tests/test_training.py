"""Configuration parsing, optimizer, training loop and evaluation reports."""

import json
import math

import numpy as np
import pytest

from kvq import tensor as T
from kvq.config import DEFAULTS, RunConfig, parse_config_text, with_seed
from kvq.errors import ConfigError
from kvq.evaluate import ABSENT, evaluate_clips, evaluate_path, read_report, write_report
from kvq.metrics import plcc, srcc
from kvq.optim import Adam
from kvq.tensor import Tensor
from kvq.train import (
    NumericalAbort,
    augment,
    config_from_checkpoint,
    load_clips,
    load_model,
    lr_scales,
    predict,
    prepare_video,
    save_model,
    stack_videos,
    train,
)

TINY = {
    "model.input_size": "4,16,16", "model.patch_size": "2,4,4", "model.channels": "8",
    "model.depths": "1", "model.heads": "2", "model.window_size": "1,2,2", "model.top_k": "1",
    "model.mlp_ratio": "2", "optim.epochs": "2", "optim.batch_size": "4",
    "data.train_clips": "8", "data.eval_clips": "4",
}


def tiny_cfg(**extra) -> RunConfig:
    return RunConfig.from_mapping(dict(TINY, **{k.replace("__", "."): str(v) for k, v in extra.items()}))


class TestConfig:
    def test_parse(self):
        text = "# comment\n\nmodel.top_k = 3\noptim.lr=0.01\n"
        assert parse_config_text(text) == {"model.top_k": "3", "optim.lr": "0.01"}

    @pytest.mark.parametrize("text", ["nonsense\n", "model.unknown = 1\n", "seed = 1\nseed = 2\n"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            RunConfig.from_mapping({"optim.lr": "abc"})
        with pytest.raises(ConfigError):
            RunConfig.from_mapping({"dtype": "float16"})
        with pytest.raises(ConfigError):
            RunConfig.from_mapping({"loss.lpc": "-1"})

    def test_defaults_build(self):
        cfg = RunConfig.from_mapping({})
        assert set(cfg.raw) == set(DEFAULTS)

    def test_hash_ignores_seed_and_out(self):
        a = tiny_cfg()
        assert with_seed(a, 9).config_hash() == a.config_hash()
        assert a.with_overrides(out="/x").config_hash() == a.config_hash()
        assert a.with_overrides(**{"optim.lr": "0.5"}).config_hash() != a.config_hash()

    def test_text_round_trip(self, tmp_path):
        cfg = tiny_cfg(seed=4)
        path = tmp_path / "run.cfg"
        path.write_text(cfg.to_text())
        assert RunConfig.load(str(path)) == cfg

    def test_shipped_configs_validate(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        full = RunConfig.load(str(root / "full_scale.cfg"))
        assert full.backbone.window_size == (8, 7, 7)
        assert full.backbone.output_grid(full.backbone.input_size) == (16, 14, 14)
        RunConfig.load(str(root / "desk.cfg"))

    def test_missing_paths(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(str(tmp_path / "absent.cfg"))
        with pytest.raises(ConfigError):
            tiny_cfg(data__train=tmp_path / "nothing").validate_paths()


class TestAdam:
    def test_first_step_is_lr_sized(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        Adam([p], lr=0.1).step([np.array([3.0, -0.5])])
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)

    def test_zero_scale_holds_parameter(self):
        p, q = (Tensor(np.ones(2), requires_grad=True) for _ in range(2))
        opt = Adam([p, q], lr=0.1)
        opt.step([np.ones(2), np.ones(2)], [0.0, 1.0])
        np.testing.assert_array_equal(p.data, np.ones(2))
        assert np.all(q.data < 1)
        assert np.all(opt.m[0] != 0)

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for _ in range(2000):
            opt.step([2 * p.data])
        np.testing.assert_allclose(p.data, 0.0, atol=1e-3)


class TestPreparation:
    def test_prepare_shapes(self, rng):
        v = rng.uniform(size=(10, 20, 24, 3))
        assert prepare_video(v, (4, 16, 16)).shape == (4, 16, 16, 3)
        assert prepare_video(v[:2], (4, 16, 16)).shape == (4, 16, 16, 3)

    def test_augment_keeps_values(self, rng):
        batch = rng.uniform(size=(3, 4, 8, 8, 3))
        out = augment(batch, np.random.default_rng(0))
        for a, b in zip(batch, out):
            np.testing.assert_allclose(np.sort(a.ravel()), np.sort(b.ravel()))

    def test_warmup_scales(self):
        cfg = tiny_cfg(optim__saliency_warmup=3, optim__saliency_lr_scale=0.5)
        from kvq import KVQModel
        model = KVQModel.init(cfg.backbone)
        names = model.parameter_names()
        early, late = lr_scales(model, cfg, 3), lr_scales(model, cfg, 4)
        for name, a, b in zip(names, early, late):
            salient = name.startswith(("saliency.", "ensemble."))
            assert (a, b) == ((0.0, 0.5) if salient else (1.0, 1.0))


class TestTraining:
    def test_log_fields(self, tmp_path):
        cfg = tiny_cfg()
        log = tmp_path / "log.jsonl"
        result = train(cfg, log_path=str(log))
        lines = [json.loads(x) for x in log.read_text().splitlines()]
        assert len(lines) == result.final_metrics["steps"] == 4
        for entry in lines:
            assert {"step", "plcc_loss", "rank_loss", "lpc_loss", "total", "config_hash", "seed"} <= set(entry)
            assert entry["config_hash"] == cfg.config_hash()

    def test_unweighted_lpc_is_logged(self):
        result = train(tiny_cfg(loss__lpc=0))
        for entry in result.log:
            assert entry["lpc_loss"] is not None
            assert entry["total"] == pytest.approx(entry["plcc_loss"] + entry["rank_loss"])

    def test_same_seed_bit_identical(self):
        a, b = train(tiny_cfg(seed=3)), train(tiny_cfg(seed=3))
        assert a.final_metrics == b.final_metrics
        for k, v in a.model.state_dict().items():
            assert v.tobytes() == b.model.state_dict()[k].tobytes()

    def test_different_seed_differs(self):
        a, b = train(tiny_cfg(seed=1)), train(tiny_cfg(seed=2))
        assert a.model.state_dict()["texture.weight"].tobytes() != b.model.state_dict()["texture.weight"].tobytes()

    def test_nan_aborts(self):
        cfg = tiny_cfg()
        clips = load_clips(cfg, "", 4, 0)
        clips[0].video = clips[0].video * np.nan
        with pytest.raises(NumericalAbort):
            train(cfg, clips)

    def test_float32_run(self):
        result = train(tiny_cfg(dtype="float32"))
        assert result.model.dtype == np.float32
        assert math.isfinite(result.final_metrics["srcc"])

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = tiny_cfg(seed=5)
        result = train(cfg)
        path = str(tmp_path / "model.kvqt")
        save_model(result.model, path, cfg)
        assert config_from_checkpoint(path) == cfg
        loaded = load_model(path, cfg)
        clips = load_clips(cfg, "", 3, 77)
        videos = stack_videos(clips, cfg)
        np.testing.assert_array_equal(predict(loaded, videos)["quality"], predict(result.model, videos)["quality"])


class TestEvaluation:
    def test_reproduces_training_metrics(self):
        cfg = tiny_cfg(seed=2)
        clips = load_clips(cfg, "", cfg.train_clips, cfg.synth_seed)
        result = train(cfg, clips)
        metrics, samples = evaluate_clips(result.model, clips)
        assert metrics["srcc"] == pytest.approx(result.final_metrics["srcc"], abs=1e-6)
        assert metrics["plcc"] == pytest.approx(result.final_metrics["plcc"], abs=1e-6)
        pred = [s["prediction"] for s in samples]
        mos = [s["mos"] for s in samples]
        assert metrics["srcc"] == pytest.approx(srcc(pred, mos), abs=1e-12)
        assert metrics["plcc"] == pytest.approx(plcc(pred, mos), abs=1e-12)

    def test_missing_saliency_marked_absent(self):
        cfg = tiny_cfg()
        clips = load_clips(cfg, "", 4, 3)
        clips[2].saliency = None
        from kvq import KVQModel
        metrics, _ = evaluate_clips(KVQModel.init(cfg.backbone), clips)
        assert metrics["sauc"] == metrics["nss"] == metrics["kl"] == ABSENT

    def test_saliency_metrics_present(self):
        cfg = tiny_cfg()
        from kvq import KVQModel
        metrics, _ = evaluate_clips(KVQModel.init(cfg.backbone, seed=1), load_clips(cfg, "", 4, 3))
        assert 0.0 <= metrics["sauc"] <= 1.0 and metrics["kl"] >= 0

    def test_region_dataset(self, tmp_path):
        from kvq import KVQModel
        from kvq.data import synth_lpvq, write_lpvq_dataset
        images, records, _ = synth_lpvq(3, 1, annotators=2)
        write_lpvq_dataset(tmp_path, images, records)
        cfg = RunConfig.from_mapping(dict(TINY, **{"model.input_size": "4,56,56", "model.patch_size": "2,8,8",
                                                   "model.window_size": "1,7,7"}))
        metrics, samples = evaluate_path(KVQModel.init(cfg.backbone, seed=0), str(tmp_path))
        assert metrics["intra_evaluated"] + metrics["intra_skipped"] == 3
        assert len(samples) == 3 and np.asarray(samples[0]["prediction"]).shape == (7, 7)

    def test_report_files(self, tmp_path):
        write_report(str(tmp_path), "set", {"srcc": 0.5, "sauc": ABSENT}, [{"id": "a"}], {"seed": 1})
        report = read_report(str(tmp_path / "report.csv"))
        assert report == {"seed": "1", "srcc": "0.5", "sauc": ABSENT}
        sample = json.loads((tmp_path / "samples.jsonl").read_text())
        assert sample == {"id": "a", "dataset": "set", "seed": 1}
