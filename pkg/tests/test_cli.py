import json

import numpy as np
import pytest
import torch

from forgekit.cli import SUITES, latest_checkpoint, orbit_extrinsics, run
from forgekit.core.errors import CheckpointError
from forgekit.volume import read_occupancy


def _lines(capsys) -> dict:
    out = capsys.readouterr().out
    return dict(line.split(" ", 1) for line in out.splitlines() if " " in line)


@pytest.fixture
def trained_run(tmp_path, tiny_config_file, toy_dataset_dir):
    run_dir = tmp_path / "run"
    code = run(["--config", tiny_config_file, "train", "--stage", "1",
                "--data", str(toy_dataset_dir), "--run-dir", str(run_dir)])
    assert code == 0
    return run_dir


def test_gen_data_is_reproducible(tmp_path, tiny_config_file, capsys):
    """Test that two runs with the same seed print the same manifest hash."""
    hashes = []
    for name in ("a", "b"):
        code = run(["--config", tiny_config_file, "gen-data", "--out", str(tmp_path / name), "--scenes", "1",
                    "--seed", "3"])
        assert code == 0
        printed = _lines(capsys)
        assert printed["manifest"].endswith("manifest.json")
        hashes.append(printed["manifest_hash"])
    assert hashes[0] == hashes[1]


def test_missing_required_argument_is_a_config_error(capsys):
    """Test that a usage error exits with code 1."""
    assert run(["gen-data"]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_override_is_a_config_error(tmp_path):
    """Test that an override naming an unknown section exits with code 1."""
    assert run(["--set", "nosuch.key=1", "gen-data", "--out", str(tmp_path)]) == 1


def test_train_stage_one(trained_run):
    """Test that training stage 1 writes its checkpoint and the resolved config."""
    assert (trained_run / "stage1.ckpt").exists()
    assert (trained_run / "config.cfg").exists()
    assert latest_checkpoint(trained_run).name == "stage1.ckpt"


def test_train_stage_three_without_prerequisites(tmp_path, tiny_config_file, toy_dataset_dir):
    """Test that stage 3 on an empty run directory exits with code 1."""
    code = run(["--config", tiny_config_file, "train", "--stage", "3",
                "--data", str(toy_dataset_dir), "--run-dir", str(tmp_path / "empty")])
    assert code == 1
    assert not (tmp_path / "empty" / "stage3.ckpt").exists()


def test_train_on_missing_dataset(tmp_path, tiny_config_file):
    """Test that a missing dataset exits with the I/O code."""
    code = run(["--config", tiny_config_file, "train", "--data", str(tmp_path / "nothing"),
                "--run-dir", str(tmp_path / "run")])
    assert code == 2


def test_eval_unknown_variant(tmp_path, tiny_config_file):
    """Test that an unknown variant exits with code 1."""
    assert run(["--config", tiny_config_file, "eval", "--variant", "bogus", "--run-dir", str(tmp_path)]) == 1


def test_eval_writes_a_report(trained_run, tiny_config_file, toy_dataset_dir, capsys):
    """Test that eval prints the table and writes the JSON report."""
    code = run(["--config", tiny_config_file, "eval", "--variant", "forge-star", "--scenes", "1",
                "--data", str(toy_dataset_dir), "--run-dir", str(trained_run)])
    assert code == 0
    out = capsys.readouterr().out
    assert "variant forge-star" in out
    report = json.loads((trained_run / "report-forge-star.json").read_text())
    assert len(report["scenes"]) == 1


def test_render_without_checkpoint(tmp_path, tiny_config_file, toy_dataset_dir):
    """Test that rendering from an empty run directory exits with code 1."""
    code = run(["--config", tiny_config_file, "render", "--data", str(toy_dataset_dir),
                "--run-dir", str(tmp_path / "empty")])
    assert code == 1
    with pytest.raises(CheckpointError):
        latest_checkpoint(tmp_path / "empty")


def test_render_orbit_and_voxels(trained_run, tiny_config_file, toy_dataset_dir, tiny_config):
    """Test that an orbit render writes images and depth, and the occupancy file reads back."""
    out = trained_run / "render-out"
    code = run(["--config", tiny_config_file, "render", "--orbit", "2", "--voxels", "--out", str(out),
                "--data", str(toy_dataset_dir), "--run-dir", str(trained_run)])
    assert code == 0
    assert (out / "orbit_000.png").exists() and (out / "orbit_001.png").exists()
    depth = np.fromfile(out / "orbit_001_depth.bin", dtype=np.float32)
    assert depth.size == (tiny_config.model.image_size // 2) ** 2
    occupancy, extent = read_occupancy(out / "occupancy.fkvx")
    assert occupancy.shape == (tiny_config.volume_size,) * 3
    assert extent == tiny_config.volume.extent


def test_orbit_starts_at_the_canonical_camera():
    """Test that the first orbit camera is the canonical one and all sit on the circle."""
    poses = orbit_extrinsics(6, 1.5, elevation_deg=0.0)
    assert torch.allclose(poses.rotation[0].abs(), torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64), atol=1e-9)
    assert torch.allclose(poses.translation[0], torch.tensor([0.0, 0.0, 1.5], dtype=torch.float64), atol=1e-9)
    distances = poses.center().norm(dim=-1)
    assert torch.allclose(distances, torch.full((6,), 1.5, dtype=torch.float64))
    assert torch.allclose(poses.translation, torch.tensor([0.0, 0.0, 1.5], dtype=torch.float64).expand(6, 3), atol=1e-9)


def test_ablate_unknown_suite(tmp_path, tiny_config_file):
    """Test that an unknown suite exits with code 1."""
    assert run(["--config", tiny_config_file, "ablate", "--suite", "bogus", "--run-dir", str(tmp_path)]) == 1


def test_every_suite_compares_at_least_two_variants():
    """Test that the sweep table is well formed."""
    for name, suite in SUITES.items():
        assert len(suite.variants) >= 2, name
        assert len({variant.label for variant in suite.variants}) == len(suite.variants)


def test_ablate_fusion_suite(tmp_path, tiny_config_file, toy_dataset_dir, capsys):
    """Test that the fusion sweep trains each variant and writes one row per variant."""
    out = tmp_path / "ablate"
    code = run(["--config", tiny_config_file, "ablate", "--suite", "fusion", "--out", str(out),
                "--data", str(toy_dataset_dir)])
    assert code == 0
    payload = json.loads((out / "ablate-fusion.json").read_text())
    assert [row["variant"] for row in payload["rows"]] == ["avg", "seq", "both"]
    assert all(row["psnr"] is not None for row in payload["rows"])
    assert "suite fusion" in capsys.readouterr().out
