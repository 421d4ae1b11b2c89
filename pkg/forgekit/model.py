"""
The assembled reconstruction network: encoder, pose estimator, fusion,
volume decoder and RGB head, plus the glue that turns relative poses into
rendering cameras.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import torch
import torch.nn as nn
from torch import Tensor

from forgekit.core.config import RunConfig
from forgekit.encoder import VoxelEncoder
from forgekit.fusion import GridFusion, canonical_grid_pose, transform_all
from forgekit.geometry import Camera, CameraPose, compose
from forgekit.pose import PoseEstimator, RelativePoseSet
from forgekit.volume import NeuralVolume, RGBHead, RenderOutput, VolumeDecoder, render_views, rgb_head

BLOCKS = ("encoder", "pose", "fusion", "decoder", "head")


@dataclass(frozen=True)
class Reconstruction:
    volume: NeuralVolume
    poses: RelativePoseSet


class ForgeModel(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        self.extent = config.volume.extent
        self.n_samples = config.render.n_samples
        self.image_size = config.model.image_size
        self.encoder = VoxelEncoder.from_config(config)
        self.pose = PoseEstimator.from_config(config)
        self.fusion = GridFusion.from_config(config)
        self.decoder = VolumeDecoder(
            in_channels=config.encoder.voxel_channels,
            hidden_channels=config.volume.hidden_channels,
            feature_channels=config.volume.feature_channels,
            grid_size=config.grid_size,
            extent=config.volume.extent,
        )
        self.head = RGBHead(config.volume.feature_channels, config.volume.hidden_channels)

    def blocks(self) -> Dict[str, nn.Module]:
        return {name: getattr(self, name) for name in BLOCKS}

    def canonical_pose(self, dtype: torch.dtype = torch.float32) -> CameraPose:
        return canonical_grid_pose(self.config.volume.canonical_distance, dtype=dtype, device=self.device)

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def encode_views(self, rgb: Tensor, mask: Tensor) -> Tensor:
        """(B, k, 3, H, W), (B, k, 1, H, W) -> (B, k, c, g, g, g)."""
        batch, n_views = rgb.shape[:2]
        grids = self.encoder(rgb.flatten(0, 1), mask.flatten(0, 1))
        return grids.reshape(batch, n_views, *grids.shape[1:])

    def estimate(self, rgb: Tensor, mask: Tensor, grids: Tensor, canonical_index: int = 0) -> RelativePoseSet:
        return self.pose(rgb, mask, grids, canonical_index)

    def reconstruct(self, grids: Tensor, rel_poses: RelativePoseSet) -> NeuralVolume:
        """Fuse (B, k, ...) grids under ``rel_poses`` and decode a batched volume."""
        canonical = self.canonical_pose(dtype=grids.dtype)
        poses = RelativePoseSet(
            rel_poses.rotations.to(grids.dtype), rel_poses.translations.to(grids.dtype), rel_poses.canonical_index
        )
        transformed = transform_all(grids, poses, canonical, self.extent)
        return self.decoder(self.fusion(transformed, poses))

    def infer(self, rgb: Tensor, mask: Tensor, canonical_index: int = 0,
              rel_poses: Optional[RelativePoseSet] = None) -> Reconstruction:
        """Full pipeline; given poses replace the estimator's."""
        grids = self.encode_views(rgb, mask)
        poses = rel_poses if rel_poses is not None else self.estimate(rgb, mask, grids, canonical_index)
        return Reconstruction(volume=self.reconstruct(grids, poses), poses=poses)

    def target_extrinsics(self, relative: CameraPose) -> CameraPose:
        """Extrinsics in the canonical grid frame of cameras at relative poses ΔΦ (..., ·)."""
        canonical = self.canonical_pose(dtype=relative.rotation.dtype)
        return compose(relative, canonical)

    def render_views(self, volume: NeuralVolume, relative: CameraPose, focal: float,
                     generator: Optional[torch.Generator] = None,
                     n_samples: Optional[int] = None) -> RenderOutput:
        """
        Render cameras given by relative poses (V, ·) against the canonical view
        from an unbatched volume. Feature maps are at half resolution; the head
        brings RGB and mask to ``image_size``.
        """
        extrinsics = self.target_extrinsics(relative)
        cameras = cameras_from_extrinsics(extrinsics, focal, self.image_size)
        half = (self.image_size // 2, self.image_size // 2)
        output = render_views(volume, cameras, n_samples or self.n_samples, half, generator)
        return rgb_head(self.head, output)


def cameras_from_extrinsics(extrinsics: CameraPose, focal: float, size: int) -> Sequence[Camera]:
    """Centered pinhole cameras for stacked extrinsics (V, ·)."""
    return [
        Camera.centered(CameraPose(rotation=rotation, translation=translation), focal, size)
        for rotation, translation in zip(extrinsics.rotation.unbind(0), extrinsics.translation.unbind(0))
    ]
