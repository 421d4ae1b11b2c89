"""
Neural volume, decoder heads and differentiable volume rendering.

The volume lives in the canonical view's grid frame: a cube of side
``extent`` centered at the origin, read out by cameras whose extrinsics map
grid-frame points into camera coordinates.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from forgekit.core.errors import DatasetIOError, PreconditionError, ShapeError
from forgekit.geometry import Camera, VoxelFeatureGrid, points_to_indices, trilinear_sample

DEPTH_EPS = 1e-6
OCCUPANCY_MAGIC = b"FKVX"


@dataclass(frozen=True)
class NeuralVolume:
    """
    Density logits and features on a D³ lattice.

    ``density`` is (1, D, D, D) and ``features`` (F, D, D, D); a leading batch
    axis is allowed on both. Rendered density is softplus(density).
    """

    density: Tensor
    features: Tensor
    extent: float = 1.0

    @property
    def resolution(self) -> int:
        return self.density.shape[-1]

    @property
    def batched(self) -> bool:
        return self.density.dim() == 5

    def sigma(self) -> Tensor:
        return F.softplus(self.density)

    def select(self, index: int) -> "NeuralVolume":
        if not self.batched:
            return self
        return NeuralVolume(density=self.density[index], features=self.features[index], extent=self.extent)


@dataclass(frozen=True)
class RenderOutput:
    """
    Volume-rendered maps at the render resolution (H', W'), plus the RGB head
    output at the image resolution when the head has run. Tensors may carry a
    leading view axis.
    """

    feature_map: Tensor  # (F, H', W')
    mask: Tensor  # (1, H', W'), Σ w_i
    depth: Tensor  # (1, H', W'), meters along the ray
    rgb: Optional[Tensor] = None  # (3, H, W)
    mask_refined: Optional[Tensor] = None  # (1, H, W)


# ============================================================
# Decoder and RGB head
# ============================================================

class VolumeDecoder(nn.Module):
    """Upsample a fused (c, g, g, g) grid to a (2g)³ neural volume with separate heads."""

    def __init__(self, in_channels: int, hidden_channels: int, feature_channels: int,
                 grid_size: int, extent: float = 1.0):
        super().__init__()
        self.in_channels = in_channels
        self.grid_size = grid_size
        self.extent = extent
        self.trunk = nn.Sequential(
            nn.ConvTranspose3d(in_channels, hidden_channels, kernel_size=4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(hidden_channels, hidden_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.density_head = nn.Sequential(
            nn.Conv3d(hidden_channels, hidden_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(hidden_channels, 1, kernel_size=1),
        )
        self.feature_head = nn.Sequential(
            nn.Conv3d(hidden_channels, hidden_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(hidden_channels, feature_channels, kernel_size=1),
        )

    def forward(self, fused: Tensor) -> NeuralVolume:
        expected = (self.in_channels, self.grid_size, self.grid_size, self.grid_size)
        if fused.dim() != 5 or tuple(fused.shape[1:]) != expected:
            raise ShapeError(f"Volume decoder expects (B, {expected}), got {tuple(fused.shape)}")
        hidden = self.trunk(fused)
        return NeuralVolume(
            density=self.density_head(hidden),
            features=self.feature_head(hidden),
            extent=self.extent,
        )


def decode_volume(decoder: VolumeDecoder, fused: VoxelFeatureGrid) -> NeuralVolume:
    values = fused.values
    volume = decoder(values if values.dim() == 5 else values[None])
    return volume if values.dim() == 5 else volume.select(0)


class RGBHead(nn.Module):
    """2× upsampling 2D convolutions: (F, H', W') -> sigmoid RGB (3) + mask (1) at (2H', 2W')."""

    def __init__(self, feature_channels: int, hidden_channels: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.ConvTranspose2d(feature_channels, hidden_channels, kernel_size=4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden_channels, hidden_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden_channels, 4, kernel_size=1),
        )

    def forward(self, feature_map: Tensor) -> Tuple[Tensor, Tensor]:
        batched = feature_map.dim() == 4
        out = torch.sigmoid(self.layers(feature_map if batched else feature_map[None]))
        rgb, mask = out[:, :3], out[:, 3:]
        return (rgb, mask) if batched else (rgb[0], mask[0])


# ============================================================
# Rays
# ============================================================

def generate_rays(camera: Camera, resolution: Optional[Tuple[int, int]] = None) -> Tuple[Tensor, Tensor]:
    """
    One ray per pixel center of ``camera`` resampled to ``resolution``.

    Returns origins and unit directions, each (H'·W', 3), in the frame the
    camera's extrinsics map from. Both stay differentiable in the pose.
    """
    cam = camera if resolution is None else camera.scaled(resolution)
    height, width = cam.resolution
    pose = cam.pose
    dtype, device = pose.translation.dtype, pose.translation.device

    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device) + 0.5,
        torch.arange(width, dtype=dtype, device=device) + 0.5,
        indexing="ij",
    )
    cx, cy = cam.principal_point
    local = torch.stack(((xs - cx) / cam.focal, (ys - cy) / cam.focal, torch.ones_like(xs)), dim=-1)
    local = local.reshape(-1, 3)
    local = local / local.norm(dim=-1, keepdim=True)

    directions = local @ pose.rotation_matrix()  # Rᵀ d for row vectors
    origins = pose.center().expand_as(directions)
    return origins, directions


def ray_cube_intersection(origins: Tensor, directions: Tensor, extent: float) -> Tuple[Tensor, Tensor, Tensor]:
    """Slab test against the centered cube; returns (t_near ≥ 0, t_far, hit)."""
    half = extent / 2
    tiny = torch.full_like(directions, 1e-12)
    safe = torch.where(directions.abs() < 1e-12, torch.where(directions < 0, -tiny, tiny), directions)
    t0 = (-half - origins) / safe
    t1 = (half - origins) / safe
    t_near = torch.minimum(t0, t1).amax(dim=-1).clamp(min=0.0)
    t_far = torch.maximum(t0, t1).amin(dim=-1)
    hit = t_far > t_near
    return t_near, torch.where(hit, t_far, t_near), hit


# ============================================================
# Rendering
# ============================================================

def _composite(volume: NeuralVolume, origins: Tensor, directions: Tensor, n_samples: int,
               generator: Optional[torch.Generator]) -> Tuple[Tensor, Tensor, Tensor]:
    n_rays = origins.shape[0]
    dtype = volume.density.dtype
    origins, directions = origins.to(dtype), directions.to(dtype)

    t_near, t_far, hit = ray_cube_intersection(origins, directions, volume.extent)
    length = t_far - t_near
    delta = length / n_samples

    if generator is None:
        offsets = torch.full((n_rays, n_samples), 0.5, dtype=dtype, device=origins.device)
    else:
        offsets = torch.rand((n_rays, n_samples), generator=generator, device=generator.device)
        offsets = offsets.to(dtype=dtype, device=origins.device)
    bins = torch.arange(n_samples, dtype=dtype, device=origins.device)
    t = t_near[:, None] + (bins[None, :] + offsets) * delta[:, None]

    points = origins[:, None, :] + t[..., None] * directions[:, None, :]
    resolution = volume.resolution
    coords = points_to_indices(points.reshape(1, -1, 3), (resolution,) * 3, volume.extent)
    grid = torch.cat((volume.density, volume.features), dim=0)[None]
    samples = trilinear_sample(grid, coords, padding="border").reshape(n_rays, n_samples, -1)

    sigma = F.softplus(samples[..., 0]) * hit[:, None].to(dtype)
    optical = sigma * delta[:, None]
    transmittance = torch.exp(-(torch.cumsum(optical, dim=-1) - optical))
    weights = transmittance * (1.0 - torch.exp(-optical))

    feature = (weights[..., None] * samples[..., 1:]).sum(dim=1)
    mask = weights.sum(dim=1).clamp(0.0, 1.0)
    depth = (weights * t).sum(dim=1) / torch.clamp(mask, min=DEPTH_EPS)
    return feature, mask, depth


def render(volume: NeuralVolume, camera: Camera, n_samples: int,
           resolution: Optional[Tuple[int, int]] = None,
           generator: Optional[torch.Generator] = None) -> RenderOutput:
    """
    Volume-render feature map, mask and depth of ``camera``.

    Samples are bin midpoints between cube entry and exit, or jittered within
    each bin when a ``generator`` is given. Rays that miss the cube read zero.
    """
    if n_samples < 2:
        raise PreconditionError(f"n_samples must be at least 2, got {n_samples}")
    if volume.batched:
        raise ShapeError("render expects a single volume; use select() on a batched one")
    height, width = resolution or camera.resolution
    origins, directions = generate_rays(camera, (height, width))
    feature, mask, depth = _composite(volume, origins, directions, n_samples, generator)
    return RenderOutput(
        feature_map=feature.transpose(0, 1).reshape(-1, height, width),
        mask=mask.reshape(1, height, width),
        depth=depth.reshape(1, height, width),
    )


def render_views(volume: NeuralVolume, cameras: Sequence[Camera], n_samples: int,
                 resolution: Optional[Tuple[int, int]] = None,
                 generator: Optional[torch.Generator] = None) -> RenderOutput:
    """Render several cameras of one volume; outputs gain a leading view axis."""
    outputs: List[RenderOutput] = [render(volume, camera, n_samples, resolution, generator) for camera in cameras]
    return RenderOutput(
        feature_map=torch.stack([out.feature_map for out in outputs]),
        mask=torch.stack([out.mask for out in outputs]),
        depth=torch.stack([out.depth for out in outputs]),
    )


def rgb_head(head: RGBHead, output: RenderOutput) -> RenderOutput:
    rgb, mask = head(output.feature_map)
    return RenderOutput(
        feature_map=output.feature_map,
        mask=output.mask,
        depth=output.depth,
        rgb=rgb,
        mask_refined=mask,
    )


# ============================================================
# Occupancy
# ============================================================

def extract_voxels(volume: NeuralVolume, threshold: float) -> Tensor:
    """Boolean occupancy (D, D, D): rendered density above ``threshold`` (1/m)."""
    if threshold <= 0:
        raise PreconditionError(f"Occupancy threshold must be positive, got {threshold}")
    return volume.sigma().reshape(volume.density.shape[-3:]) > threshold


def write_occupancy(path: Path, occupancy: Tensor | np.ndarray, extent: float) -> Path:
    """
    Write an occupancy grid as run-length-encoded binary.

    Layout (little-endian): magic ``FKVX``, uint32 D, float64 extent, then
    uint32 run lengths over the row-major flattened grid, alternating
    empty/occupied and starting with an empty run (possibly of length 0).
    """
    grid = occupancy.detach().cpu().numpy() if isinstance(occupancy, Tensor) else np.asarray(occupancy)
    grid = grid.astype(bool)
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise ShapeError(f"Occupancy grids are cubic, got {grid.shape}")

    flat = grid.ravel()
    edges = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds)
    if flat.size and flat[0]:
        runs = np.concatenate(([0], runs))

    header = OCCUPANCY_MAGIC + np.array([grid.shape[0]], dtype="<u4").tobytes() + np.array([extent], dtype="<f8").tobytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(runs.astype("<u4").tobytes())
    except OSError as e:
        raise DatasetIOError(f"Error writing occupancy file {path}: {e}") from e
    return path


def read_occupancy(path: Path) -> Tuple[np.ndarray, float]:
    """Inverse of :func:`write_occupancy`; returns (grid, extent)."""
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"Error reading occupancy file {path}: {e}") from e
    if len(payload) < 16 or payload[:4] != OCCUPANCY_MAGIC:
        raise DatasetIOError(f"{path} is not an occupancy file")

    size = int(np.frombuffer(payload, dtype="<u4", count=1, offset=4)[0])
    extent = float(np.frombuffer(payload, dtype="<f8", count=1, offset=8)[0])
    runs = np.frombuffer(payload, dtype="<u4", offset=16).astype(np.int64)
    if runs.sum() != size ** 3:
        raise DatasetIOError(f"{path}: run lengths cover {runs.sum()} voxels, expected {size ** 3}")

    values = np.arange(runs.size) % 2 == 1
    flat = np.repeat(values, runs)
    return flat.reshape(size, size, size), extent
