import numpy as np
import pytest

from mvp import cli
from mvp.data import (DecodeError, SyntheticSpec, load_dataset, nearest_mean_accuracy, read_packed,
                      read_ppm, synth_generate, synth_images, write_packed, write_ppm)
from mvp.episodes import InsufficientDataError
from mvp.vit import VIT_TINY


def _ppm_tree(root, n_classes=5, per_class=30, size=4):
    rng = np.random.default_rng(0)
    for c in range(n_classes):
        d = root / f"class{c}"
        d.mkdir(parents=True)
        for i in range(per_class):
            write_ppm(d / f"{i:03d}.ppm", rng.integers(0, 256, (3, size, size), dtype=np.uint8))


class TestPPM:
    def test_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 7), dtype=np.uint8)
        write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)

    def test_header_comment(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P6\n# hi\n1 1\n255\n\x01\x02\x03")
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm").ravel(), [1, 2, 3])

    def test_bad_file_reports_path(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n1 2 3")
        with pytest.raises(DecodeError, match="a.ppm"):
            read_ppm(tmp_path / "a.ppm")


class TestLoad:
    def test_ppm_directory(self, tmp_path):
        _ppm_tree(tmp_path)
        m = load_dataset(tmp_path)
        assert m.num_classes == 5
        assert [len(files) for _, files in m.classes] == [30] * 5

    def test_empty_directory(self, tmp_path):
        with pytest.raises(InsufficientDataError, match="insufficient classes"):
            load_dataset(tmp_path)

    def test_truncated_ppm_in_tree(self, tmp_path):
        _ppm_tree(tmp_path)
        bad = tmp_path / "class0" / "000.ppm"
        bad.write_bytes(bad.read_bytes()[:-5])
        with pytest.raises(DecodeError, match="000.ppm"):
            load_dataset(tmp_path)

    def test_packed_round_trip(self, tmp_path):
        imgs, labs = synth_images(SyntheticSpec(n_classes=5, samples_per_class=3, image_size=6))
        write_packed(tmp_path / "d.mvpd", imgs, labs)
        back, back_labels = read_packed(tmp_path / "d.mvpd")
        np.testing.assert_array_equal(np.stack(back), imgs)
        np.testing.assert_array_equal(back_labels, labs)
        np.testing.assert_array_equal(load_dataset(tmp_path / "d.mvpd").images, imgs)

    def test_packed_truncated(self, tmp_path):
        imgs, labs = synth_images(SyntheticSpec(n_classes=5, samples_per_class=2, image_size=4))
        write_packed(tmp_path / "d.mvpd", imgs, labs)
        (tmp_path / "d.mvpd").write_bytes((tmp_path / "d.mvpd").read_bytes()[:-1])
        with pytest.raises(DecodeError, match="truncated"):
            load_dataset(tmp_path / "d.mvpd")


class TestSynthetic:
    def test_byte_identical(self, tmp_path):
        spec = SyntheticSpec(seed=4)
        synth_generate(spec, tmp_path / "a")
        synth_generate(spec, tmp_path / "b")
        assert (tmp_path / "a/synthetic.mvpd").read_bytes() == (tmp_path / "b/synthetic.mvpd").read_bytes()

    def test_totals(self, tmp_path):
        m = synth_generate(SyntheticSpec(n_classes=8, samples_per_class=40), tmp_path)
        assert len(m) == 320 and m.num_classes == 8

    def test_separable_without_noise(self, tmp_path):
        m = synth_generate(SyntheticSpec(noise=0.0), tmp_path)
        assert nearest_mean_accuracy(m) == 1.0

    def test_other_seed_gives_other_classes(self):
        a, _ = synth_images(SyntheticSpec(n_classes=5, samples_per_class=1, noise=0.0, seed=0))
        b, _ = synth_images(SyntheticSpec(n_classes=5, samples_per_class=1, noise=0.0, seed=1))
        assert not np.array_equal(a, b)


class TestParseCli:
    def test_param_count_tiny(self, capsys):
        assert cli.main(["param-count", "--preset", "tiny", "--prompt-tokens", "200"]) == 0
        assert capsys.readouterr().out.strip() == "460800"

    def test_maxway_locks_sampler(self):
        _, cfg, _ = cli.parse_cli(["meta-train", "--maxway", "5"])
        assert cfg.sampler.max_way == 5

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.parse_cli(["meta-train", "--nope"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            cli.parse_cli(["train-everything"])
        assert exc.value.code == 2

    def test_config_file_then_flags(self, tmp_path):
        conf = tmp_path / "run.cfg"
        conf.write_text("# comment\nseed = 4\nmaxshot = 3  # trailing\npreset = tiny\n"
                        "lr_grid = 0.01, 0\n")
        command, cfg, _ = cli.parse_cli(["finetune-eval", "--config", str(conf), "--seed", "9"])
        assert command == "finetune-eval"
        assert cfg.seed == 9 and cfg.sampler.max_shot == 3 and cfg.vit == VIT_TINY
        assert cfg.lr_grid == (0.01, 0.0)

    def test_bad_config_key(self, tmp_path):
        conf = tmp_path / "run.cfg"
        conf.write_text("learning_speed = 3\n")
        with pytest.raises(SystemExit) as exc:
            cli.parse_cli(["meta-train", "--config", str(conf)])
        assert exc.value.code == 2

    def test_sample_episodes(self, tmp_path, capsys):
        synth_generate(SyntheticSpec(), tmp_path / "data")
        assert cli.main(["sample-episodes", "--data", str(tmp_path / "data"), "-n", "4",
                         "--out", str(tmp_path / "o")]) == 0
        assert len((tmp_path / "o/episodes.csv").read_text().splitlines()) == 5

    def test_missing_data_is_an_error(self, tmp_path, capsys):
        assert cli.main(["meta-train", "--out", str(tmp_path)]) == 1
        assert "needs --data" in capsys.readouterr().err
