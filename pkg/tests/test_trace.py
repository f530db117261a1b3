import numpy as np
import pytest

from flashpip.model import TrajectoryRecord
from flashpip.tensor import Tensor
from flashpip.trace import (UpdateFlagMap, hit_ratio, iou_updated,
                            pgm_write, trajectory_report, update_flags,
                            updated_fraction, write_trace_csv)


def record_from_disparities(maps):
    rec = TrajectoryRecord(T=len(maps) - 1)
    rec.disparities = [Tensor(np.asarray(m, dtype=np.float32)) for m in maps]
    rec.hidden_states = [None] * len(maps)
    rec.deltas = [None] * (len(maps) - 1)
    return rec


class TestUpdateFlags:
    def test_identical_maps_all_false(self):
        d = np.random.default_rng(0).random((4, 5)).astype(np.float32)
        f = update_flags(d, d, 1e-3)
        assert not f.flags.any()

    def test_single_pixel_changed(self):
        d = np.zeros((4, 5), np.float32)
        d2 = d.copy()
        d2[2, 3] += 2e-3
        f = update_flags(d, d2, epsilon=1e-3)
        assert f.flags.sum() == 1 and f.flags[2, 3]

    def test_random_vs_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.random((5, 6))
        b = rng.random((5, 6))
        f = update_flags(a, b, epsilon=0.3)
        for y in range(5):
            for x in range(6):
                assert f.flags[y, x] == (abs(b[y, x] - a[y, x]) > 0.3)

    def test_validation(self):
        with pytest.raises(ValueError, match="shape"):
            update_flags(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError, match="epsilon"):
            update_flags(np.zeros((2, 2)), np.zeros((2, 2)), epsilon=0.0)


class TestHitRatio:
    def flags(self, arr):
        return UpdateFlagMap(np.asarray(arr, dtype=bool), 1e-3)

    def test_identical_is_one(self):
        f = self.flags(np.random.default_rng(2).random((6, 6)) < 0.3)
        assert hit_ratio(f, f) == 1.0

    def test_complementary_is_zero(self):
        a = self.flags(np.random.default_rng(3).random((6, 6)) < 0.5)
        b = self.flags(~a.flags)
        assert hit_ratio(a, b) == 0.0

    def test_counting_oracle_99_of_100(self):
        a = np.zeros((10, 10), bool)
        b = a.copy()
        b[4, 7] = True
        assert hit_ratio(self.flags(a), self.flags(b)) == 0.99

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = self.flags(rng.random((7, 9)) < 0.4)
            b = self.flags(rng.random((7, 9)) < 0.4)
            assert hit_ratio(a, b) == hit_ratio(b, a)

    def test_iou_variants(self):
        empty = self.flags(np.zeros((3, 3), bool))
        assert iou_updated(empty, empty) == 1.0
        a = np.zeros((3, 3), bool)
        a[0, 0] = True
        b = np.zeros((3, 3), bool)
        b[0, 0] = True
        b[1, 1] = True
        assert iou_updated(self.flags(a), self.flags(b)) == 0.5


class TestUpdatedFraction:
    def test_all_false(self):
        assert updated_fraction(UpdateFlagMap(np.zeros((5, 5), bool), 1e-3)) == 0.0

    def test_one_of_hundred(self):
        f = np.zeros((10, 10), bool)
        f[3, 3] = True
        assert updated_fraction(UpdateFlagMap(f, 1e-3)) == 0.01

    def test_identical_maps_zero_for_any_epsilon(self):
        d = np.random.default_rng(5).random((6, 6)).astype(np.float32)
        for eps in (1e-6, 1e-3, 1.0):
            assert updated_fraction(update_flags(d, d, eps)) == 0.0


class TestTrajectoryReport:
    def test_constant_trajectory(self):
        d = np.random.default_rng(6).random((1, 1, 4, 4)).astype(np.float32)
        rec = record_from_disparities([d, d, d, d])
        series = trajectory_report(rec, 1e-3)
        assert series.fractions == [0.0, 0.0, 0.0]
        assert series.hit_ratios == [1.0, 1.0]

    def test_alternating_updates_zero_hit_ratio(self):
        base = np.zeros((1, 1, 3, 3), np.float32)
        bumped = base + 1.0
        rec = record_from_disparities([base, bumped, bumped, base + 2.0])
        series = trajectory_report(rec, 1e-3)
        assert series.fractions == [1.0, 0.0, 1.0]
        assert series.hit_ratios == [0.0, 0.0]

    def test_series_lengths(self):
        maps = [np.full((1, 1, 2, 2), float(i), np.float32) for i in range(5)]
        series = trajectory_report(record_from_disparities(maps), 1e-3)
        assert len(series.fractions) == 4
        assert len(series.hit_ratios) == 3
        assert all(0.0 <= v <= 1.0 for v in series.fractions + series.hit_ratios)

    def test_t_too_small(self):
        rec = record_from_disparities([np.zeros((1, 1, 2, 2), np.float32)] * 2)
        with pytest.raises(ValueError, match="T >= 2"):
            trajectory_report(rec)

    def test_equal_consecutive_flagmaps_hit_one_regardless_of_count(self):
        base = np.zeros((1, 1, 4, 4), np.float32)
        step = base.copy()
        step[0, 0, :2] = 1.0   # same 8 pixels move each iteration
        rec = record_from_disparities([base, step, step + step, step * 3])
        series = trajectory_report(rec, 1e-3)
        assert series.fractions[0] == 0.5
        assert series.hit_ratios == [1.0, 1.0]


class TestOutputs:
    def test_csv_layout(self, tmp_path):
        maps = [np.full((1, 1, 2, 2), float(i), np.float32) for i in range(3)]
        series = trajectory_report(record_from_disparities(maps), 1e-3)
        p = tmp_path / "trace.csv"
        write_trace_csv(p, series)
        lines = p.read_text().splitlines()
        assert lines[0] == "iteration,updated_fraction,hit_ratio_vs_prev,iou_vs_prev"
        assert len(lines) == 3
        assert lines[1].startswith("1,1,")      # first row has no hit ratio
        assert lines[1].endswith(",,")

    def test_pgm_dump(self, tmp_path):
        flags = UpdateFlagMap(np.array([[True, False], [False, True]]), 1e-3)
        p = tmp_path / "flags.pgm"
        pgm_write(p, flags)
        data = p.read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert data[-4:] == bytes([255, 0, 0, 255])
