import numpy as np
import pytest

from mvp.augment import BenchRow, aug_bench, cutmix, cutout, mixup, pixel_augment
from mvp.pipeline import EvalReport, TraceRow
from mvp.report import emit_bench, emit_report, fmt
from mvp.vit import ViTConfig


class TestFormat:
    @pytest.mark.parametrize("x,text", [(0.8, "0.800000"), (0.0, "0.000000"), (0.86, "0.860000"),
                                        (3, "3"), (True, "1"), ("abc", "abc")])
    def test_values(self, x, text):
        assert fmt(x) == text


class TestEmit:
    def test_summary_line(self, tmp_path):
        emit_report(EvalReport(0.8, 0.0, 100, 0, "d"), tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[-2] == "mean,half_width,n,seed,config_digest"
        assert lines[-1].startswith("0.800000,0.000000,100,")

    def test_trace_rows(self, tmp_path):
        trace = [TraceRow(i, 0, 5, 1, 1.0 / (i + 1), 0.5) for i in range(300)]
        emit_report(trace, tmp_path / "t.csv", seed=3, config_digest="x")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert len(lines) == 1 + 300 + 2
        assert lines[-1].endswith(",300,3,x")

    def test_rerun_is_byte_identical(self, tmp_path):
        rep = EvalReport.from_accuracies([0.6, 1.0], seed=1, config_digest="c")
        emit_report(rep, tmp_path / "a.csv")
        emit_report(rep, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_bench_shape(self, tmp_path):
        rows = [BenchRow(10, k, 10 * k, 1e-5, 3e-5) for k in (1, 2, 4, 6, 8, 10)]
        emit_bench(rows, tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "way,shot,batch,rpr_us,pixel_us"
        assert len(lines) == 1 + 6 + 2
        assert lines[1] == "10,1,10,10.000000,30.000000"


class TestPixelAugment:
    @pytest.fixture
    def images(self):
        return np.random.default_rng(0).random((4, 3, 8, 8)).astype(np.float32)

    def test_shapes_and_dtype(self, images):
        rng = np.random.default_rng(1)
        for op in (mixup, cutmix, cutout, pixel_augment):
            out = op(images, rng)
            assert out.shape == images.shape and out.dtype == images.dtype

    def test_mixup_is_convex(self, images):
        out = mixup(images, np.random.default_rng(2))
        assert out.min() >= images.min() - 1e-6 and out.max() <= images.max() + 1e-6

    def test_cutout_zeroes_a_box(self, images):
        out = cutout(images, np.random.default_rng(3))
        assert ((out == 0).reshape(4, -1).sum(axis=1) >= 3 * 2 * 2).all()

    def test_input_untouched(self, images):
        before = images.copy()
        pixel_augment(images, np.random.default_rng(0))
        np.testing.assert_array_equal(images, before)


def test_aug_bench_rows():
    rows = aug_bench(ViTConfig(16, 16, 4, 4, 8, 1, 2), n_trials=3, seed=0)
    assert [(r.way, r.shot, r.batch) for r in rows] == [(10, k, 10 * k) for k in (1, 2, 4, 6, 8, 10)]
    assert all(r.rpr_seconds > 0 and r.pixel_seconds > 0 for r in rows)
