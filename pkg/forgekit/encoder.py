"""
Per-view voxel encoder: a residual 2D backbone whose channel axis is
deprojected into depth bins and lifted by one 3D convolution.
"""
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from forgekit.core.config import RunConfig
from forgekit.core.errors import ShapeError
from forgekit.geometry import Camera, VoxelFeatureGrid


@dataclass(frozen=True)
class ImageObservation:
    rgb: Tensor  # (3, H, W) in [0, 1]
    mask: Tensor  # (1, H, W) in {0, 1}
    camera: Optional[Camera] = None  # ground truth, datagen and eval only

    def __post_init__(self):
        height, width = self.rgb.shape[-2:]
        if height != width:
            raise ShapeError(f"Input views must be square, got {height}x{width}")
        if tuple(self.mask.shape[-2:]) != (height, width):
            raise ShapeError("Mask and image resolutions differ")

    @property
    def size(self) -> int:
        return self.rgb.shape[-1]


class ResidualBlock2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.conv1(x))
        out = self.conv2(out)
        return self.relu(out + x)


class Backbone2d(nn.Module):
    """
    From-scratch residual stack with total stride ``stride`` (2, 4 or 8).

    Input is RGB with the background zeroed plus the mask as a 4th channel;
    output has ``out_channels`` channels, which must split evenly into
    ``depth_bins``.
    """

    def __init__(self, stride: int, width: int, blocks: int, out_channels: int, depth_bins: int):
        super().__init__()
        if out_channels % depth_bins:
            raise ShapeError(f"Backbone channels ({out_channels}) must be divisible by depth bins ({depth_bins})")
        self.stride = stride
        layers: list[nn.Module] = [nn.Conv2d(4, width, kernel_size=3, padding=1), nn.ReLU(inplace=True)]
        channels = width
        for stage in range(int(math.log2(stride))):
            next_channels = width * 2 ** (stage + 1)
            layers += [nn.Conv2d(channels, next_channels, kernel_size=3, stride=2, padding=1), nn.ReLU(inplace=True)]
            layers += [ResidualBlock2d(next_channels) for _ in range(blocks)]
            channels = next_channels
        layers.append(nn.Conv2d(channels, out_channels, kernel_size=1))
        self.layers = nn.Sequential(*layers)

    def forward(self, rgb: Tensor, mask: Tensor) -> Tensor:
        return self.layers(torch.cat((rgb * mask, mask), dim=1))


def deproject(features_2d: Tensor, depth_bins: int) -> Tensor:
    """
    Reshape (B, C, h, w) into (B, C/d, d, h, w): channel z·C/d + q at (u, v)
    lands at voxel (z, u, v), channel q.
    """
    batch, channels, height, width = features_2d.shape
    if channels % depth_bins:
        raise ShapeError(f"Cannot split {channels} channels into {depth_bins} depth bins")
    return features_2d.view(batch, depth_bins, channels // depth_bins, height, width).transpose(1, 2)


class UNet3d(nn.Module):
    """Small residual 3D U-Net used only by the refinement ablation."""

    def __init__(self, channels: int):
        super().__init__()
        self.down = nn.Sequential(
            nn.Conv3d(channels, channels * 2, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(channels * 2, channels * 2, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.up = nn.ConvTranspose3d(channels * 2, channels, kernel_size=4, stride=2, padding=1)
        self.merge = nn.Conv3d(channels * 2, channels, kernel_size=3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        up = self.up(self.down(x))
        return x + self.merge(torch.cat((x, up), dim=1))


class VoxelEncoder(nn.Module):
    def __init__(self, image_size: int, stride: int, width: int, blocks: int,
                 channels_2d: int, depth_bins: int, voxel_channels: int, unet_refine: bool = False):
        super().__init__()
        if image_size % stride:
            raise ShapeError(f"Image size {image_size} is not divisible by stride {stride}")
        self.image_size = image_size
        self.depth_bins = depth_bins
        self.voxel_channels = voxel_channels
        self.backbone = Backbone2d(stride, width, blocks, channels_2d, depth_bins)
        self.lift = nn.Conv3d(channels_2d // depth_bins, voxel_channels, kernel_size=3, padding=1)
        self.refine = UNet3d(voxel_channels) if unet_refine else None

    @classmethod
    def from_config(cls, config: RunConfig) -> "VoxelEncoder":
        enc = config.encoder
        return cls(
            image_size=config.model.image_size,
            stride=enc.stride,
            width=enc.width,
            blocks=enc.blocks,
            channels_2d=enc.channels_2d,
            depth_bins=enc.depth_bins,
            voxel_channels=enc.voxel_channels,
            unet_refine=enc.unet_refine,
        )

    def forward(self, rgb: Tensor, mask: Tensor) -> Tensor:
        """(B, 3, H, W), (B, 1, H, W) -> (B, c, d, h, w)."""
        if tuple(rgb.shape[-2:]) != (self.image_size, self.image_size):
            raise ShapeError(f"Encoder expects {self.image_size}x{self.image_size} images, got {tuple(rgb.shape[-2:])}")
        grid = self.lift(deproject(self.backbone(rgb, mask), self.depth_bins))
        if self.refine is not None:
            grid = self.refine(grid)
        return grid


def encode(encoder: VoxelEncoder, image: ImageObservation, frame: int = 0) -> VoxelFeatureGrid:
    values = encoder(image.rgb[None], image.mask[None])[0]
    return VoxelFeatureGrid(values=values, frame=frame)
