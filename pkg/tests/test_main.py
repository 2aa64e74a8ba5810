"""
Unit Tests for the Command Line Interface

Tests argument handling, exit codes and the metrics command.
"""

import numpy as np
import pytest

from app.config import parse_config
from app.main import _apply_overrides, build_parser, main
from app.services.exporters import write_field
from app.services.grid import SpaceTag, make_grid, self_dual_half_extent
from app.services.phantoms import object_phantom, save_phantom


@pytest.fixture
def config_file(tmp_path):
    """Small run configuration with its phantom"""
    grid = make_grid(32, self_dual_half_extent(32))
    save_phantom(object_phantom(grid, radius=2.5), tmp_path / "object.pgm")
    path = tmp_path / "run.cfg"
    path.write_text(
        "pump.sigma_p_L = 2.0\n"
        "grid.samples_per_axis = 32\n"
        "basis.rank = 16\n"
        "matter.magnitude = object.pgm\n"
        "output.gallery_modes = 0\n"
    )
    return path


class TestParser:
    """Test the argument parser"""

    def test_stage_commands(self):
        """Test that every stage is a subcommand"""
        parser = build_parser()
        for command in ("decompose", "couple", "image", "farfield", "specresolve"):
            args = parser.parse_args([command, "--config", "run.cfg"])
            assert args.command == command

    def test_run_stage_choice(self):
        """Test that run --stage accepts stage names only"""
        parser = build_parser()
        assert parser.parse_args(["run", "--config", "c", "--stage", "couple"]).stage == "couple"
        with pytest.raises(SystemExit):
            parser.parse_args(["run", "--config", "c", "--stage", "everything"])


class TestMain:
    """Test command execution and exit codes"""

    def test_decompose(self, config_file, tmp_path):
        """Test a single stage run"""
        code = main(["decompose", "--config", str(config_file), "--out", str(tmp_path / "o")])
        assert code == 0
        assert (tmp_path / "o" / "decompose" / "spectrum.csv").is_file()

    def test_run_until_stage(self, config_file, tmp_path, capsys):
        """Test that run --stage stops and prints the manifest path"""
        out = tmp_path / "o"
        code = main(["run", "--config", str(config_file), "--out", str(out), "--stage", "couple"])
        assert code == 0
        assert capsys.readouterr().out.strip() == str(out / "manifest.csv")
        assert not (out / "image").exists()

    def test_bad_config(self, tmp_path):
        """Test that configuration errors exit with code 2"""
        path = tmp_path / "bad.cfg"
        path.write_text("pump.sigmap = 2\n")
        assert main(["decompose", "--config", str(path)]) == 2

    def test_missing_config(self, tmp_path):
        """Test that a missing config file exits with code 2"""
        assert main(["run", "--config", str(tmp_path / "absent.cfg")]) == 2

    def test_missing_upstream(self, config_file, tmp_path):
        """Test that a stage before its upstream exits with code 4"""
        assert main(["image", "--config", str(config_file), "--out", str(tmp_path / "o")]) == 4

    def test_seed_override(self, config_file):
        """Test that --seed replaces output.seed and leaves the rest of the config"""
        config = parse_config(config_file)
        args = build_parser().parse_args(["image", "--config", str(config_file), "--seed", "7"])
        seeded = _apply_overrides(config, args)
        assert seeded.output.seed == 7
        assert seeded.pump == config.pump
        unseeded = build_parser().parse_args(["image", "--config", "c"])
        assert _apply_overrides(config, unseeded) is config

    def test_bad_seed(self, config_file, tmp_path):
        """Test that a negative seed is a configuration error"""
        code = main(
            ["decompose", "--config", str(config_file), "--out", str(tmp_path), "--seed", "-1"]
        )
        assert code == 2

    def test_bad_threads_env(self, config_file, tmp_path, monkeypatch):
        """Test that an invalid thread count in the environment exits with code 2"""
        monkeypatch.setenv("QDIFF_THREADS", "-2")
        assert main(["decompose", "--config", str(config_file), "--out", str(tmp_path)]) == 2

    def test_metrics(self, tmp_path, capsys):
        """Test the metrics command output"""
        image = np.arange(64, dtype=float).reshape(8, 8)
        write_field(tmp_path / "ref.bin", image, SpaceTag.REAL_IMAGE)
        write_field(tmp_path / "img.bin", 2.0 * image, SpaceTag.REAL_IMAGE)
        code = main(
            ["metrics", "--ref", str(tmp_path / "ref.bin"), "--img", str(tmp_path / "img.bin")]
        )
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("nmse ")
        assert lines[1].startswith("pearson ")
        assert float(lines[1].split()[1]) == pytest.approx(1.0)

    def test_metrics_missing_file(self, tmp_path):
        """Test that a missing image exits with code 4"""
        code = main(
            ["metrics", "--ref", str(tmp_path / "a.bin"), "--img", str(tmp_path / "b.bin")]
        )
        assert code == 4
