"""Binary tensor files, checkpoints, region-annotation CSVs and PGM export."""

import os
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from kvq import kvqt
from kvq.errors import ValidationError
from kvq.export import denormalize_u8, export_map, normalize_u8, read_pgm, read_sidecar, write_pgm
from kvq.lpvq import AnnotationRecord, cell_mos, load_lpvq_csv, parse_score, write_lpvq_csv

dtypes = st.sampled_from([np.float32, np.float64, np.int64, np.uint8, np.int32])


def full_records(image_ids, annotators=14, seed=0):
    rng = np.random.default_rng(seed)
    return [
        AnnotationRecord(i, r, c, f"a{a:02d}", float(rng.integers(2, 11)) / 2)
        for i in image_ids for r in range(7) for c in range(7) for a in range(annotators)
    ]


class TestKvqt:
    def test_header_layout(self):
        blob = kvqt.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert blob[:4] == b"KVQT"
        assert struct.unpack("<BBI", blob[4:10]) == (1, 1, 2)
        assert struct.unpack("<2I", blob[10:18]) == (2, 3)
        assert blob[18:] == np.arange(6, dtype="<f4").tobytes()

    @given(st.data())
    def test_round_trip_bit_exact(self, data):
        dtype = data.draw(dtypes)
        arr = data.draw(arrays(dtype, array_shapes(min_dims=0, max_dims=4, max_side=5)))
        back = kvqt.decode(kvqt.encode(arr))
        assert back.dtype == np.dtype(dtype) and back.shape == arr.shape
        assert back.tobytes() == np.ascontiguousarray(arr).tobytes()

    def test_bad_magic(self):
        with pytest.raises(ValidationError):
            kvqt.decode(b"NOPE" + bytes(10))

    def test_truncated_payload(self):
        blob = kvqt.encode(np.ones(4))
        with pytest.raises(ValidationError):
            kvqt.decode(blob[:-1])

    def test_file_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(3, 4, 5))
        kvqt.save(tmp_path / "x.kvqt", arr)
        np.testing.assert_array_equal(kvqt.load(tmp_path / "x.kvqt"), arr)
        assert not [p for p in os.listdir(tmp_path) if p.startswith(".tmp-")]

    def test_checkpoint_round_trip(self, tmp_path):
        params = {"b.w": np.arange(6.0).reshape(2, 3), "a.bias": np.zeros(3, np.float32)}
        path = tmp_path / "ck.kvqt"
        kvqt.save_checkpoint(path, params, {"seed": 7, "config_hash": "abc"})
        loaded, meta = kvqt.load_checkpoint(path)
        assert set(loaded) == set(params)
        for k in params:
            assert loaded[k].tobytes() == params[k].tobytes()
        assert meta == {"seed": "7", "config_hash": "abc"}
        lines = open(kvqt.manifest_path(path)).read().splitlines()
        assert lines[2] == "a.bias\t0"


class TestLpvqCsv:
    def test_round_trip(self, tmp_path):
        recs = full_records(["img_a", "img_b"])
        path = tmp_path / "x.csv"
        write_lpvq_csv(path, recs)
        assert set(load_lpvq_csv(path)) == set(recs)

    def test_rows_per_image(self, tmp_path):
        recs = full_records(["img_a"])
        assert len(recs) == 686
        # 50 images at 14 annotators each
        assert 50 * 49 * 14 == 34300

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("id,row,col,who,score\n")
        with pytest.raises(ValidationError):
            load_lpvq_csv(path)

    @pytest.mark.parametrize("text", ["5.5", "0.5", "3.25", "abc", "nan"])
    def test_score_off_lattice(self, text):
        with pytest.raises(ValidationError):
            parse_score(text)

    def test_bad_score_reports_row(self, tmp_path):
        recs = full_records(["img_a"], annotators=1)
        path = tmp_path / "x.csv"
        write_lpvq_csv(path, recs)
        lines = path.read_text().splitlines()
        lines[5] = lines[5].rsplit(",", 1)[0] + ",5.5"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError) as info:
            load_lpvq_csv(path)
        assert info.value.row == 5

    def test_duplicate_rejected(self, tmp_path):
        recs = full_records(["img_a"], annotators=1)
        path = tmp_path / "x.csv"
        write_lpvq_csv(path, recs + [recs[3]])
        with pytest.raises(ValidationError, match="duplicate"):
            load_lpvq_csv(path)

    def test_incomplete_grid_rejected(self, tmp_path):
        recs = full_records(["img_a"], annotators=1)[:-1]
        path = tmp_path / "x.csv"
        write_lpvq_csv(path, recs)
        with pytest.raises(ValidationError, match="cells"):
            load_lpvq_csv(path)

    def test_cell_mos_hand_average(self):
        recs = full_records(["img_a"], annotators=3, seed=4)
        expected = np.zeros((7, 7))
        for r in recs:
            expected[r.row, r.col] += r.score / 3
        np.testing.assert_allclose(cell_mos(recs, "img_a"), expected, atol=1e-12)


class TestPgmExport:
    def test_constant_map_is_zero(self):
        pixels, lo, hi = normalize_u8(np.full((2, 3), 4.0))
        assert not pixels.any() and lo == hi == 4.0

    @settings(suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(arrays(np.float64, (2, 5, 6), elements=st.floats(-1e3, 1e3)))
    def test_reconstruction_within_one_step(self, tmp_path, values):
        export_map(tmp_path, "m", values)
        side = read_sidecar(tmp_path / "m.norm.txt")
        step = (side["max"] - side["min"]) / 255.0
        for f in range(values.shape[0]):
            pgm = read_pgm(tmp_path / f"m_f{f:03d}.pgm")
            assert pgm.shape == values.shape[1:]
            back = denormalize_u8(pgm, side["min"], side["max"])
            assert np.max(np.abs(back - values[f])) <= step + 1e-9 * max(1.0, np.abs(values).max())
        np.testing.assert_array_equal(kvqt.load(tmp_path / "m.kvqt"), values)

    def test_pgm_header(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.arange(6, dtype=np.uint8).reshape(2, 3))
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n3 2\n255\n")
