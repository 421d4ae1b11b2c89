import pytest
import torch

from forgekit.core.config import RunConfig
from forgekit.core.config_manager import write_config_file
from forgekit.datagen import SceneDataset, make_dataset
from forgekit.model import ForgeModel

TINY_LAYERS = {
    "model": {"image_size": 16, "views": 3, "split_n": 1},
    "encoder": {"stride": 2, "width": 8, "blocks": 1, "depth_bins": 8, "channels_2d": 32, "voxel_channels": 4},
    "pose": {"token_stride": 4, "token_channels": 16, "heads": 2, "gpr_blocks": 1, "feature_dim": 16,
             "hidden_dim": 16},
    "pairwise": {"channels": 4, "pe_channels": 12, "heads": 2},
    "volume": {"feature_channels": 4, "hidden_channels": 8},
    "render": {"n_samples": 8},
    "train": {"batch_size": 1, "stage1_iterations": 2, "stage1_milestones": [1], "stage2_iterations": 3,
              "stage2_milestones": [2], "stage3_iterations": 2, "stage3_milestones": [1], "log_every": 1,
              "checkpoint_every": 1000, "val_scenes": 1},
    "datagen": {"scenes": 2, "resolution": 16},
    "eval": {"tto_iters": 2, "voxel_resolution": 8},
    "ablate": {"stage1_iterations": 1, "stage2_iterations": 3},
}


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig.from_layers(TINY_LAYERS)


@pytest.fixture
def tiny_model(tiny_config) -> ForgeModel:
    torch.manual_seed(0)
    return ForgeModel(tiny_config).eval()


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory):
    config = RunConfig.from_layers(TINY_LAYERS)
    out = tmp_path_factory.mktemp("toy")
    make_dataset(2, config.model.views, 7, out, config.datagen)
    return out


@pytest.fixture
def toy_dataset(toy_dataset_dir) -> SceneDataset:
    return SceneDataset(toy_dataset_dir)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config) -> str:
    return str(write_config_file(tiny_config, tmp_path / "tiny.cfg"))
