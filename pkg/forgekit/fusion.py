"""
Bring per-view voxel grids into the canonical grid frame and fuse them:
mean pooling initializes the hidden state, then a 3D convolutional GRU takes
one update per view, nearest views first.
"""
from typing import List, Optional

import torch
import torch.nn as nn
from torch import Tensor

from forgekit.core.config import RunConfig
from forgekit.geometry import (
    CameraPose,
    VoxelFeatureGrid,
    compose,
    grid_resample,
    invert,
    relative_pose,
    rotation_error_deg,
)
from forgekit.pose import RelativePoseSet

FUSION_MODES = ("avg", "seq", "both")


def canonical_grid_pose(distance: float = 1.5, dtype: torch.dtype = torch.float64, device=None) -> CameraPose:
    """Φ¹: identity rotation, cube center ``distance`` meters ahead of the canonical camera."""
    return CameraPose(
        rotation=torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype, device=device),
        translation=torch.tensor([0.0, 0.0, distance], dtype=dtype, device=device),
    )


def view_extrinsics(rel_poses: RelativePoseSet, canonical_pose: CameraPose) -> CameraPose:
    """Φ^i = ΔΦ_1^i · Φ¹ for every view (..., k, ·); these map canonical grid points to camera i."""
    every = rel_poses.all_views()
    canonical = canonical_pose.to(dtype=every.rotation.dtype, device=every.rotation.device)
    return compose(every, canonical)


def grid_transforms(rel_poses: RelativePoseSet, canonical_pose: CameraPose) -> CameraPose:
    """Rigid maps from each view's grid frame to the canonical grid frame (..., k, ·)."""
    extrinsics = view_extrinsics(rel_poses, canonical_pose)
    canonical = canonical_pose.to(dtype=extrinsics.rotation.dtype, device=extrinsics.rotation.device)
    camera_to_canonical = relative_pose(extrinsics, canonical)
    return compose(invert(canonical), compose(camera_to_canonical, canonical))


def transform_all(grids: Tensor, rel_poses: RelativePoseSet, canonical_pose: CameraPose,
                  extent: float = 1.0) -> Tensor:
    """
    Resample every query grid into the canonical frame.

    ``grids`` is (B, k, c, d, h, w) with a matching batched pose set, or
    (k, c, d, h, w) with an unbatched one. The canonical grid passes through.
    """
    batched = grids.dim() == 6
    values = grids if batched else grids[None]
    batch, n_views = values.shape[:2]
    if n_views == 1:
        return grids

    transforms = grid_transforms(rel_poses, canonical_pose)
    rotations = transforms.rotation.reshape(batch, n_views, 4)
    translations = transforms.translation.reshape(batch, n_views, 3)

    queries = rel_poses.query_indices
    flat = values[:, queries].flatten(0, 1)
    moved = grid_resample(
        VoxelFeatureGrid(values=flat, extent=extent),
        CameraPose(rotation=rotations[:, queries].flatten(0, 1), translation=translations[:, queries].flatten(0, 1)),
        frame=rel_poses.canonical_index,
    ).values.reshape(batch, len(queries), *values.shape[2:])

    views = list(moved.unbind(1))
    views.insert(rel_poses.canonical_index, values[:, rel_poses.canonical_index])
    out = torch.stack(views, dim=1)
    return out if batched else out[0]


def fusion_order(rel_poses: RelativePoseSet) -> List[List[int]]:
    """
    Per batch element, view indices sorted by (rotation angle of ΔΦ, translation
    norm, index); the canonical view has key (0, 0, index).
    """
    rotations = rel_poses.rotations.detach()
    translations = rel_poses.translations.detach()
    if rotations.dim() == 2:
        rotations, translations = rotations[None], translations[None]
    identity = rotations.new_tensor([1.0, 0.0, 0.0, 0.0])
    angles = rotation_error_deg(rotations, identity).cpu().tolist()
    norms = translations.norm(dim=-1).cpu().tolist()

    orders = []
    for angle_row, norm_row in zip(angles, norms):
        keys = [(0.0, 0.0, rel_poses.canonical_index)]
        for row, index in enumerate(rel_poses.query_indices):
            keys.append((angle_row[row], norm_row[row], index))
        orders.append([key[2] for key in sorted(keys)])
    return orders


class ConvGRUCell3d(nn.Module):
    """Convolutional GRU cell on 3D feature grids."""

    def __init__(self, input_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        self.input_channels = input_channels
        self.hidden_channels = hidden_channels
        padding = kernel_size // 2
        self.reset_gate = nn.Conv3d(input_channels + hidden_channels, hidden_channels, kernel_size, padding=padding)
        self.update_gate = nn.Conv3d(input_channels + hidden_channels, hidden_channels, kernel_size, padding=padding)
        self.output_gate = nn.Conv3d(input_channels + hidden_channels, hidden_channels, kernel_size, padding=padding)

    def gates(self, x: Tensor, hidden: Tensor) -> tuple[Tensor, Tensor]:
        inputs = torch.cat((x, hidden), dim=1)
        return torch.sigmoid(self.reset_gate(inputs)), torch.sigmoid(self.update_gate(inputs))

    def forward(self, x: Tensor, hidden: Optional[Tensor] = None) -> Tensor:
        if hidden is None:
            hidden = x.new_zeros(x.shape[0], self.hidden_channels, *x.shape[2:])
        reset_gate, update_gate = self.gates(x, hidden)
        candidate = torch.tanh(self.output_gate(torch.cat((x, reset_gate * hidden), dim=1)))
        return (1 - update_gate) * candidate + update_gate * hidden


class GridFusion(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3, mode: str = "both"):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"Unknown fusion mode: {mode}")
        self.mode = mode
        self.cell = ConvGRUCell3d(channels, channels, kernel_size)

    @classmethod
    def from_config(cls, config: RunConfig) -> "GridFusion":
        return cls(config.encoder.voxel_channels, config.fusion.kernel_size, config.fusion.mode)

    def forward(self, transformed: Tensor, rel_poses: RelativePoseSet) -> Tensor:
        """(B, k, c, d, h, w) grids in the canonical frame -> (B, c, d, h, w)."""
        mean = transformed.mean(dim=1)
        if self.mode == "avg":
            return mean

        hidden = mean if self.mode == "both" else torch.zeros_like(mean)
        orders = torch.tensor(fusion_order(rel_poses), device=transformed.device)
        rows = torch.arange(transformed.shape[0], device=transformed.device)
        for step in range(orders.shape[1]):
            hidden = self.cell(transformed[rows, orders[:, step]], hidden)
        return hidden


def fuse(fusion: GridFusion, transformed: Tensor, rel_poses: RelativePoseSet) -> VoxelFeatureGrid:
    batched = transformed.dim() == 6
    fused = fusion(transformed if batched else transformed[None], rel_poses)
    return VoxelFeatureGrid(values=fused if batched else fused[0], frame=rel_poses.canonical_index)
