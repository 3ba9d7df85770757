from pathlib import Path

import numpy as np
import pytest

import ulmtrack
from ulmtrack import io
from ulmtrack.cli import EXIT_INPUT, EXIT_OK, main
from ulmtrack.config import load_config

CONFIGS = Path(ulmtrack.__file__).parent / "configs"


def simulate(out, *extra):
    return main(["-q", "simulate", "--out", str(out), "--volume-stride", "0", *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = str(CONFIGS / "parallel_ulm.toml")
    assert simulate(root / "rec", "--config", cfg, "--set", "acquisition.duration=2.0") == EXIT_OK
    assert main(["-q", "ulm", str(root / "rec"), "--out", str(root / "ulm")]) == EXIT_OK
    assert main(["-q", "report", str(root / "rec"), "--ulm", str(root / "ulm")]) == EXIT_OK
    return root


def test_selftest_passes(capsys):
    assert main(["selftest"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS") for line in out)


def test_zero_duration_gives_single_frame(tmp_path):
    assert simulate(tmp_path, "--seed", "2", "--set", "acquisition.duration=0") == EXIT_OK
    _, _, rows = io.read_csv(tmp_path / "poses.csv")
    assert len(rows) == 1


def test_untracked_run_flags_target_lost(tmp_path):
    assert simulate(tmp_path, "--config", str(CONFIGS / "mixed_untracked.toml"),
                    "--set", "acquisition.duration=8.0") == EXIT_OK
    _, header, rows = io.read_csv(tmp_path / "poses.csv")
    lost = [int(float(r[header.index("target_lost")])) for r in rows]
    assert any(lost)


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        assert simulate(tmp_path / name, "--seed", "9", "--set", "acquisition.duration=1.5",
                        "--volume-stride", "40") == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_static_report(tmp_path):
    assert simulate(tmp_path / "rec", "--config", str(CONFIGS / "static.toml"),
                    "--set", "acquisition.duration=1.0") == EXIT_OK
    assert main(["-q", "report", str(tmp_path / "rec")]) == EXIT_OK
    text = (tmp_path / "rec" / "report" / "report.txt").read_text()
    assert "recorded run: 100.00%" in text
    assert "onset frame: -1" in text


def test_pipeline_outputs(pipeline):
    ulm_dir = pipeline / "ulm"
    for name in ("localizations.csv", "tracks.csv", "translations.csv", "density.hdr", "speed.hdr",
                 "density_mip.pgm", "speed_mip.pgm", "contrast_mip.pgm"):
        assert (ulm_dir / name).exists(), name
    h = load_config(pipeline / "rec" / "config.toml").hash()
    assert io.csv_hash(ulm_dir / "tracks.csv") == h
    assert io.read_volume(ulm_dir / "density").data.sum() > 0
    assert io.read_pgm(ulm_dir / "density_mip.pgm").dtype == np.uint8
    text = (pipeline / "rec" / "report" / "report.txt").read_text()
    assert "mean link speed" in text and "FSC" in text


def test_report_is_reproducible(pipeline, tmp_path):
    assert main(["-q", "report", str(pipeline / "rec"), "--ulm", str(pipeline / "ulm"),
                 "--out", str(tmp_path)]) == EXIT_OK
    for name in ("report.txt", "residual_stats.csv", "fsc.csv"):
        assert (tmp_path / name).read_bytes() == (pipeline / "rec" / "report" / name).read_bytes()


def test_report_refuses_mismatched_inputs(pipeline, tmp_path, capsys):
    import shutil

    ulm_copy = tmp_path / "ulm"
    shutil.copytree(pipeline / "ulm", ulm_copy)
    path = ulm_copy / "tracks.csv"
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("# config_hash=0000000000000000\n" + "".join(lines[1:]))
    code = main(["-q", "report", str(pipeline / "rec"), "--ulm", str(ulm_copy), "--out", str(tmp_path / "r")])
    assert code == EXIT_INPUT
    assert "mismatched" in capsys.readouterr().err


def test_unknown_config_key_is_input_error(tmp_path, capsys):
    assert simulate(tmp_path, "--set", "tracking.bogus=1") == EXIT_INPUT
    assert "bogus" in capsys.readouterr().err


def test_missing_config_file_is_input_error(tmp_path):
    assert simulate(tmp_path, "--config", str(tmp_path / "none.toml")) == EXIT_INPUT


def test_invalid_value_is_input_error(tmp_path):
    assert simulate(tmp_path, "--set", "acquisition.rate_hz=-5") == EXIT_INPUT


def test_parser_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
