import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvq.data import (
    SampleSpec,
    SynthConfig,
    base_content,
    blur_region,
    contrast_saliency,
    distort_cells,
    quantization_levels,
    read_dataset,
    read_lpvq_dataset,
    replicate_image,
    resize_frames,
    sample_frames,
    sample_indices,
    segment_bounds,
    synth_clip,
    synth_dataset,
    synth_lpvq,
    write_dataset,
    write_lpvq_dataset,
)
from kvq.errors import ConfigError, ContractError
from kvq.lpvq import cell_mos

TINY = SynthConfig(frames=4, height=16, width=16, cell=(2, 8, 8))


class TestSampling:
    def test_four_per_segment(self):
        idx = sample_indices(64, SampleSpec(32, 8, seed=3))
        assert len(idx) == 32
        for s in range(8):
            part = idx[4 * s:4 * s + 4]
            assert np.all((part >= 8 * s) & (part < 8 * s + 8))

    def test_strictly_increasing_and_deterministic(self):
        a = sample_indices(100, SampleSpec(32, 8, seed=11))
        assert np.all(np.diff(a) > 0)
        np.testing.assert_array_equal(a, sample_indices(100, SampleSpec(32, 8, seed=11)))

    def test_equal_coverage_over_seeds(self):
        bounds = segment_bounds(50, 8)
        for seed in range(1000):
            idx = sample_indices(50, SampleSpec(16, 8, seed=seed))
            counts = np.histogram(idx, bins=bounds)[0]
            assert np.all(counts == 2)

    def test_too_short(self):
        with pytest.raises(ContractError):
            sample_indices(10, SampleSpec(32, 8))

    def test_indivisible_spec(self):
        with pytest.raises(ConfigError):
            SampleSpec(30, 8)

    def test_sample_frames_picks_rows(self):
        video = np.arange(40.0)[:, None, None, None] * np.ones((40, 2, 2, 3))
        spec = SampleSpec(8, 4, seed=2)
        np.testing.assert_array_equal(sample_frames(video, spec)[:, 0, 0, 0], sample_indices(40, spec))


class TestResize:
    def test_constant(self):
        v = np.full((2, 5, 7, 3), 0.3)
        np.testing.assert_allclose(resize_frames(v, 11, 4), 0.3, atol=1e-12)

    def test_identity(self, rng):
        v = rng.uniform(size=(2, 5, 7, 3))
        np.testing.assert_allclose(resize_frames(v, 5, 7), v, atol=1e-12)

    def test_ramp_doubling(self):
        w = 6
        ramp = np.tile(np.arange(w, dtype=float)[None, None, :, None], (1, 3, 1, 3))
        out = resize_frames(ramp, 3, 2 * w)
        # align-corners: x_out -> x_out * (w - 1) / (2w - 1)
        expected = np.arange(2 * w) * (w - 1) / (2 * w - 1)
        np.testing.assert_allclose(out[0, 1, :, 2], expected, atol=1e-12)

    def test_replicate(self, rng):
        img = rng.uniform(size=(5, 6, 3))
        v = replicate_image(img)
        assert v.shape == (16, 5, 6, 3)
        assert v[0].tobytes() == img.tobytes()
        assert all(np.array_equal(f, img) for f in v)


class TestSynthClip:
    def test_zero_severity(self):
        clip = synth_clip(5, TINY, severity=np.zeros(TINY.grid))
        clean = base_content(np.random.default_rng([5]), 4, 16, 16)
        np.testing.assert_array_equal(clip.video, clean)
        np.testing.assert_array_equal(clip.local_quality, 1.0)
        assert clip.global_mos == pytest.approx(1.0, abs=1e-12)

    def test_mos_recomputation(self):
        for seed in range(5):
            clip = synth_clip(seed, TINY)
            assert np.mean(clip.saliency * clip.local_quality) == pytest.approx(clip.global_mos, abs=1e-9)
            assert clip.saliency.mean() == pytest.approx(1.0, abs=1e-12)

    def test_max_blur_lowers_variance(self):
        clean = base_content(np.random.default_rng(0), 2, 32, 32)
        cell = np.s_[:, 8:16, 16:24]
        assert blur_region(clean, 3.0)[cell].var() < clean[cell].var()

    def test_only_distorted_cell_changes(self):
        clean = base_content(np.random.default_rng(1), 2, 16, 16)
        sev = np.zeros((1, 2, 2))
        sev[0, 0, 1] = 0.6
        out = distort_cells(clean, sev, (2, 8, 8), (1,))
        changed = np.any(out != clean, axis=(0, 3))
        assert changed[:8, 8:].any() and not changed[:8, :8].any() and not changed[8:].any()

    def test_quantization_levels(self):
        assert quantization_levels(0.0) == 16 and quantization_levels(1.0) == 4

    @given(st.integers(0, 10_000))
    def test_permutation_consistency(self, seed):
        rng = np.random.default_rng(seed)
        sev = rng.uniform(size=TINY.grid)
        perm = rng.permutation(sev.size)
        shuffled = sev.reshape(-1)[perm].reshape(sev.shape)
        a = synth_clip(seed, TINY, severity=sev)
        b = synth_clip(seed, TINY, severity=shuffled)
        np.testing.assert_array_equal(b.local_quality.reshape(-1), a.local_quality.reshape(-1)[perm])
        np.testing.assert_array_equal(a.saliency, b.saliency)

    def test_saliency_follows_contrast(self):
        clean = np.full((2, 16, 16, 3), 0.5)
        clean[:, :8, :8] = np.indices((8, 8)).sum(0)[None, :, :, None] % 2
        s = contrast_saliency(clean, (2, 8, 8))
        assert s[0, 0, 0] == s.max()

    def test_dataset_seeds_and_threads(self):
        a = synth_dataset(3, 9, TINY, threads=1)
        b = synth_dataset(3, 9, TINY, threads=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.video, y.video)
        assert a[2].seed == (9, 2)

    def test_directory_round_trip(self, tmp_path):
        clips = synth_dataset(2, 4, TINY)
        clips[1].saliency = None
        write_dataset(tmp_path, clips)
        back = read_dataset(tmp_path)
        np.testing.assert_array_equal(back[0].video, clips[0].video)
        assert back[0].global_mos == clips[0].global_mos
        assert back[1].saliency is None
        assert back[0].meta["id"] == "clip_0000"


class TestSynthRegions:
    def test_records_and_round_trip(self, tmp_path):
        images, records, quality = synth_lpvq(2, 0, annotators=3)
        assert len(records) == 2 * 49 * 3
        assert images["img_000"].shape == (56, 56, 3)
        write_lpvq_dataset(tmp_path, images, records)
        back_images, back_records = read_lpvq_dataset(tmp_path)
        assert set(back_records) == set(records)
        np.testing.assert_array_equal(back_images["img_001"], images["img_001"])

    def test_scores_track_quality(self):
        images, records, quality = synth_lpvq(1, 3, annotators=14)
        mos = cell_mos(records, "img_000")
        assert np.corrcoef(mos.ravel(), quality["img_000"].ravel())[0, 1] > 0.8
