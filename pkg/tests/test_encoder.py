import pytest
import torch

from forgekit.core.errors import ShapeError
from forgekit.encoder import Backbone2d, ImageObservation, VoxelEncoder, deproject, encode


def test_deproject_channel_layout():
    """Test that channel z*C/d + q at pixel (u, v) lands at voxel (z, u, v), channel q."""
    features = torch.arange(2 * 12 * 3 * 3, dtype=torch.float32).reshape(2, 12, 3, 3)
    grid = deproject(features, depth_bins=4)
    assert grid.shape == (2, 3, 4, 3, 3)
    for z in range(4):
        for q in range(3):
            assert torch.equal(grid[:, q, z], features[:, z * 3 + q])


def test_deproject_rejects_uneven_split():
    """Test that channels that do not split into depth bins are refused."""
    with pytest.raises(ShapeError):
        deproject(torch.zeros(1, 10, 2, 2), depth_bins=4)


def test_backbone_rejects_uneven_channels():
    """Test that the backbone refuses an output width not divisible by the depth bins."""
    with pytest.raises(ShapeError):
        Backbone2d(stride=2, width=8, blocks=1, out_channels=30, depth_bins=8)


def test_encoder_output_shape(tiny_config):
    """Test that the encoder produces a (c, d, h, w) grid at the configured scale."""
    encoder = VoxelEncoder.from_config(tiny_config)
    grids = encoder(torch.rand(3, 3, 16, 16), torch.ones(3, 1, 16, 16))
    assert grids.shape == (3, 4, 8, 8, 8)


def test_encoder_rejects_wrong_resolution(tiny_config):
    """Test that images at the wrong resolution raise a shape error."""
    encoder = VoxelEncoder.from_config(tiny_config)
    with pytest.raises(ShapeError):
        encoder(torch.rand(1, 3, 32, 32), torch.ones(1, 1, 32, 32))


def test_encoder_with_unet_refinement(tiny_config):
    """Test that the U-Net refinement keeps the grid shape."""
    config = tiny_config.with_overrides({"encoder": {"unet_refine": True}})
    encoder = VoxelEncoder.from_config(config)
    assert encoder.refine is not None
    assert encoder(torch.rand(2, 3, 16, 16), torch.ones(2, 1, 16, 16)).shape == (2, 4, 8, 8, 8)


def test_background_pixels_are_masked_out(tiny_config):
    """Test that RGB outside the mask does not influence the grid."""
    torch.manual_seed(0)
    encoder = VoxelEncoder.from_config(tiny_config)
    mask = torch.zeros(1, 1, 16, 16)
    mask[..., 4:12, 4:12] = 1.0
    rgb = torch.rand(1, 3, 16, 16)
    noisy = rgb.clone()
    noisy[..., :4, :] = torch.rand(1, 3, 4, 16)
    assert torch.allclose(encoder(rgb, mask), encoder(noisy, mask))


def test_encode_single_observation(tiny_config):
    """Test that encoding one observation returns a grid tagged with its frame."""
    encoder = VoxelEncoder.from_config(tiny_config)
    grid = encode(encoder, ImageObservation(rgb=torch.rand(3, 16, 16), mask=torch.ones(1, 16, 16)), frame=2)
    assert grid.frame == 2
    assert grid.spatial_shape == (8, 8, 8)


def test_observation_must_be_square():
    """Test that non-square inputs are rejected."""
    with pytest.raises(ShapeError):
        ImageObservation(rgb=torch.rand(3, 16, 8), mask=torch.ones(1, 16, 8))
