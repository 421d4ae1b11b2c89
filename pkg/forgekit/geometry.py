"""
Pose algebra, camera model, 3D positional embeddings and rigid resampling of
voxel grids.

Poses are world-to-camera extrinsics, x_cam = R x_world + t, so that
``relative_pose(a, b) = b · a⁻¹`` maps camera-a coordinates to camera-b
coordinates. Camera axes are x right, y down, z forward (right-handed).

Grid values are laid out ``(c, d, h, w)`` with d, h, w running along z, y, x
of the grid's own frame; the grid spans a cube of side ``extent`` centered at
that frame's origin. All functions here are pure.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from forgekit.core.errors import GeometryError, ShapeError

UNIT_TOLERANCE = 1e-6
SNAP_TOLERANCE = 1e-6


# ============================================================
# Quaternions (w, x, y, z)
# ============================================================

def hemisphere(q: Tensor) -> Tensor:
    """Flip sign so that the first nonzero of (w, x, y, z) is positive."""
    nonzero = (q != 0).to(torch.int32)
    first = torch.argmax(nonzero, dim=-1, keepdim=True)
    lead = torch.gather(q, -1, first)
    sign = torch.where(lead < 0, -torch.ones_like(lead), torch.ones_like(lead))
    return q * sign


def normalize_quaternion(q: Tensor) -> Tensor:
    return hemisphere(q / q.norm(dim=-1, keepdim=True))


def check_unit(q: Tensor) -> None:
    deviation = (q.norm(dim=-1) - 1.0).abs()
    if bool((deviation > UNIT_TOLERANCE).any()):
        raise GeometryError(f"Quaternion is not unit norm (deviation {deviation.max().item():.3g})")


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ),
        dim=-1,
    )


def quat_conjugate(q: Tensor) -> Tensor:
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: Tensor, check: bool = True) -> Tensor:
    """Rotation matrix of a unit quaternion; non-unit input is rejected."""
    if check:
        check_unit(q)
    w, x, y, z = q.unbind(-1)
    rows = (
        torch.stack((1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)), dim=-1),
        torch.stack((2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)), dim=-1),
        torch.stack((2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)), dim=-1),
    )
    return torch.stack(rows, dim=-2)


def matrix_to_quat(matrix: Tensor) -> Tensor:
    """Hemisphere-normalized quaternion of a rotation matrix (Shepperd's method)."""
    m = matrix
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    trace = m00 + m11 + m22

    def _root(value: Tensor) -> Tensor:
        return 2.0 * torch.sqrt(torch.clamp(1.0 + value, min=1e-12))

    s_w = _root(trace)
    s_x = _root(m00 - m11 - m22)
    s_y = _root(m11 - m00 - m22)
    s_z = _root(m22 - m00 - m11)
    candidates = torch.stack(
        (
            torch.stack((s_w / 4, (m[..., 2, 1] - m[..., 1, 2]) / s_w,
                         (m[..., 0, 2] - m[..., 2, 0]) / s_w, (m[..., 1, 0] - m[..., 0, 1]) / s_w), -1),
            torch.stack(((m[..., 2, 1] - m[..., 1, 2]) / s_x, s_x / 4,
                         (m[..., 0, 1] + m[..., 1, 0]) / s_x, (m[..., 0, 2] + m[..., 2, 0]) / s_x), -1),
            torch.stack(((m[..., 0, 2] - m[..., 2, 0]) / s_y, (m[..., 0, 1] + m[..., 1, 0]) / s_y,
                         s_y / 4, (m[..., 1, 2] + m[..., 2, 1]) / s_y), -1),
            torch.stack(((m[..., 1, 0] - m[..., 0, 1]) / s_z, (m[..., 0, 2] + m[..., 2, 0]) / s_z,
                         (m[..., 1, 2] + m[..., 2, 1]) / s_z, s_z / 4), -1),
        ),
        dim=-2,
    )
    choice = torch.argmax(torch.stack((trace, m00, m11, m22), dim=-1), dim=-1)
    index = choice[..., None, None].expand(*choice.shape, 1, 4)
    q = torch.gather(candidates, -2, index).squeeze(-2)
    return normalize_quaternion(q)


def quat_matrix_roundtrip(q: Tensor) -> Tensor:
    return matrix_to_quat(quat_to_matrix(q))


def quat_from_axis_angle(axis: Sequence[float] | Tensor, angle: float | Tensor,
                         dtype: torch.dtype = torch.float64) -> Tensor:
    """Quaternion for a rotation of ``angle`` radians about ``axis``."""
    axis_t = torch.as_tensor(axis, dtype=dtype)
    axis_t = axis_t / axis_t.norm()
    angle_t = torch.as_tensor(angle, dtype=dtype)
    half = angle_t / 2
    q = torch.cat((torch.cos(half).reshape(1), torch.sin(half) * axis_t))
    return hemisphere(q)


def rotation_error_deg(a: Tensor, b: Tensor) -> Tensor:
    """Geodesic angle of a·b⁻¹ in degrees, in [0, 180]; sign of either input is irrelevant."""
    r = quat_multiply(a, quat_conjugate(b))
    angle = 2.0 * torch.atan2(r[..., 1:].norm(dim=-1), r[..., 0].abs())
    return torch.rad2deg(angle)


# ============================================================
# SE(3) poses
# ============================================================

@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform; serialized as [w, x, y, z, tx, ty, tz]."""

    # x_cam = R x_world + t, camera axes x right, y down, z forward (OpenCV, not camera-to-world y-up)
    rotation: Tensor  # (4,) unit quaternion
    translation: Tensor  # (3,) meters

    @classmethod
    def identity(cls, dtype: torch.dtype = torch.float64, device=None) -> "CameraPose":
        return cls(
            rotation=torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype, device=device),
            translation=torch.zeros(3, dtype=dtype, device=device),
        )

    @classmethod
    def from_vector(cls, vector: Sequence[float] | Tensor, dtype: torch.dtype = torch.float64) -> "CameraPose":
        values = torch.as_tensor(vector, dtype=dtype) if not isinstance(vector, Tensor) else vector
        if values.shape[-1] != 7:
            raise ShapeError(f"Pose vectors have 7 entries, got {tuple(values.shape)}")
        return cls(rotation=normalize_quaternion(values[..., :4]), translation=values[..., 4:])

    @classmethod
    def from_rt(cls, rotation_matrix: Tensor, translation: Tensor) -> "CameraPose":
        return cls(rotation=matrix_to_quat(rotation_matrix), translation=translation)

    def to_vector(self) -> Tensor:
        return torch.cat((self.rotation, self.translation), dim=-1)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.to_vector().detach().cpu().tolist()]

    def rotation_matrix(self) -> Tensor:
        return quat_to_matrix(self.rotation, check=False)

    def matrix(self) -> Tensor:
        top = torch.cat((self.rotation_matrix(), self.translation[..., :, None]), dim=-1)
        bottom = self.translation.new_tensor([0.0, 0.0, 0.0, 1.0]).expand(*top.shape[:-2], 1, 4)
        return torch.cat((top, bottom), dim=-2)

    def apply(self, points: Tensor) -> Tensor:
        """Transform points (..., 3): R p + t."""
        return points @ self.rotation_matrix().transpose(-1, -2) + self.translation

    def center(self) -> Tensor:
        """Camera center in world coordinates, -Rᵀt."""
        return -(self.rotation_matrix().transpose(-1, -2) @ self.translation[..., None])[..., 0]

    def to(self, dtype: Optional[torch.dtype] = None, device=None) -> "CameraPose":
        return CameraPose(
            rotation=self.rotation.to(dtype=dtype, device=device),
            translation=self.translation.to(dtype=dtype, device=device),
        )

    def detach(self) -> "CameraPose":
        return CameraPose(rotation=self.rotation.detach(), translation=self.translation.detach())


def compose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Group product a·b, acting as x ↦ R_a(R_b x + t_b) + t_a."""
    rotation = normalize_quaternion(quat_multiply(a.rotation, b.rotation))
    translation = (a.rotation_matrix() @ b.translation[..., None])[..., 0] + a.translation
    return CameraPose(rotation=rotation, translation=translation)


def invert(pose: CameraPose) -> CameraPose:
    rotation = hemisphere(quat_conjugate(pose.rotation))
    translation = -(pose.rotation_matrix().transpose(-1, -2) @ pose.translation[..., None])[..., 0]
    return CameraPose(rotation=rotation, translation=translation)


def relative_pose(phi_i: CameraPose, phi_j: CameraPose) -> CameraPose:
    """T^j_i = Φ^j · (Φ^i)⁻¹: maps camera-i coordinates to camera-j coordinates."""
    return compose(phi_j, invert(phi_i))


def look_at(center: Tensor, target: Optional[Tensor] = None, roll: float = 0.0,
            up: Optional[Tensor] = None) -> CameraPose:
    """
    World-to-camera pose of a camera at ``center`` whose optical axis passes
    through ``target`` (the origin by default), rolled by ``roll`` radians
    about that axis. ``up`` defaults to +z.
    """
    dtype = center.dtype
    target = torch.zeros(3, dtype=dtype) if target is None else target
    forward = target - center
    forward = forward / forward.norm()
    up = torch.tensor([0.0, 0.0, 1.0], dtype=dtype) if up is None else up.to(dtype)
    if torch.cross(forward, up, dim=-1).norm() < 1e-6:
        up = torch.tensor([0.0, 1.0, 0.0], dtype=dtype)
    right = torch.cross(forward, up, dim=-1)
    right = right / right.norm()
    down = torch.cross(forward, right, dim=-1)

    cos_r, sin_r = math.cos(roll), math.sin(roll)
    rolled_right = cos_r * right + sin_r * down
    rolled_down = -sin_r * right + cos_r * down

    cam_to_world = torch.stack((rolled_right, rolled_down, forward), dim=-1)
    world_to_cam = cam_to_world.transpose(-1, -2)
    translation = -(world_to_cam @ center)
    return CameraPose.from_rt(world_to_cam, translation)


# ============================================================
# Cameras
# ============================================================

@dataclass(frozen=True)
class Camera:
    """Pinhole camera with square pixels."""

    pose: CameraPose
    focal: float  # pixels
    principal_point: Tuple[float, float]  # (cx, cy) pixels
    resolution: Tuple[int, int]  # (H, W)

    def __post_init__(self):
        height, width = self.resolution
        cx, cy = self.principal_point
        if self.focal <= 0:
            raise GeometryError(f"Focal length must be positive, got {self.focal}")
        if not (0 <= cx <= width and 0 <= cy <= height):
            raise GeometryError(f"Principal point {self.principal_point} outside image {self.resolution}")

    @classmethod
    def centered(cls, pose: CameraPose, focal: float, size: int) -> "Camera":
        return cls(pose=pose, focal=focal, principal_point=(size / 2, size / 2), resolution=(size, size))

    def scaled(self, resolution: Tuple[int, int]) -> "Camera":
        """Same camera sampled on a different pixel grid."""
        scale_y = resolution[0] / self.resolution[0]
        scale_x = resolution[1] / self.resolution[1]
        return Camera(
            pose=self.pose,
            focal=self.focal * scale_x,
            principal_point=(self.principal_point[0] * scale_x, self.principal_point[1] * scale_y),
            resolution=resolution,
        )


# ============================================================
# Positional embedding
# ============================================================

@dataclass(frozen=True)
class PositionalEmbedding3D:
    grid: Tensor  # (d, h, w, c)

    @property
    def flat(self) -> Tensor:
        """PE_1D with shape (N_3D, c)."""
        return self.grid.reshape(-1, self.grid.shape[-1])


def make_positional_embedding(d: int, h: int, w: int, c: int,
                              dtype: torch.dtype = torch.float32) -> PositionalEmbedding3D:
    """
    Per-axis sinusoids at frequencies 2^0 … 2^(c/6-1); the lowest band spans
    half a period over the axis, so every voxel gets a distinct code.
    """
    if c % 6:
        raise ShapeError(f"Positional embedding width must be divisible by 6, got {c}")
    n_freq = c // 6
    freqs = 2.0 ** torch.arange(n_freq, dtype=torch.float64)

    bands = []
    for size in (d, h, w):
        phase = torch.arange(size, dtype=torch.float64)[:, None] * (math.pi / size) * freqs[None, :]
        bands.append(torch.cat((torch.sin(phase), torch.cos(phase)), dim=-1))

    z_band = bands[0][:, None, None, :].expand(d, h, w, -1)
    y_band = bands[1][None, :, None, :].expand(d, h, w, -1)
    x_band = bands[2][None, None, :, :].expand(d, h, w, -1)
    grid = torch.cat((z_band, y_band, x_band), dim=-1).to(dtype)
    return PositionalEmbedding3D(grid=grid)


# ============================================================
# Voxel grids and resampling
# ============================================================

@dataclass(frozen=True)
class VoxelFeatureGrid:
    """Feature lattice attached to a metric cube in one view's grid frame."""

    values: Tensor  # (c, d, h, w), or (B, c, d, h, w) for a batch of grids
    frame: int = 0
    extent: float = 1.0

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        d, h, w = self.values.shape[-3:]
        return d, h, w

    @property
    def channels(self) -> int:
        return self.values.shape[-4]

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.values).all())


def voxel_centers(shape: Tuple[int, int, int], extent: float,
                  dtype: torch.dtype = torch.float32, device=None) -> Tensor:
    """Metric (x, y, z) centers of every voxel, shape (d, h, w, 3)."""
    d, h, w = shape

    def _axis(n: int) -> Tensor:
        return ((torch.arange(n, dtype=dtype, device=device) + 0.5) / n - 0.5) * extent

    z, y, x = torch.meshgrid(_axis(d), _axis(h), _axis(w), indexing="ij")
    return torch.stack((x, y, z), dim=-1)


def points_to_indices(points: Tensor, shape: Tuple[int, int, int], extent: float) -> Tensor:
    """Continuous (z, y, x) voxel indices of metric (x, y, z) points."""
    d, h, w = shape
    sizes = points.new_tensor([w, h, d])
    idx_xyz = (points / extent + 0.5) * sizes - 0.5
    return idx_xyz.flip(-1)


def snap_to_lattice(coords: Tensor, tolerance: float = SNAP_TOLERANCE) -> Tensor:
    """
    Move coordinates within ``tolerance`` of an integer exactly onto it.
    The correction is detached, so gradients pass straight through.
    """
    nearest = torch.round(coords)
    close = (coords - nearest).abs() < tolerance
    return torch.where(close, coords + (nearest - coords).detach(), coords)


def trilinear_sample(values: Tensor, coords: Tensor, padding: str = "zeros") -> Tensor:
    """
    Trilinear lookup of ``values`` (B, C, D, H, W) at continuous (z, y, x)
    indices ``coords`` (B, N, 3); returns (B, N, C).

    ``padding="zeros"`` reads zero for lattice corners outside the grid;
    ``padding="border"`` clamps coordinates onto the grid first. Points on
    the lattice return the stored value exactly.
    """
    if padding not in ("zeros", "border"):
        raise ValueError(f"Unknown padding mode: {padding}")
    batch, channels, d, h, w = values.shape
    coords = snap_to_lattice(coords)
    sizes = coords.new_tensor([d, h, w])
    # grid_sample takes (x, y, z) in [-1, 1], with align_corners=True mapping ±1 onto the end voxel centers
    normalized = (2.0 * coords / (sizes - 1).clamp(min=1.0) - 1.0).flip(-1)
    grid = normalized[:, :, None, None, :]

    sampled = F.grid_sample(values, grid, mode="bilinear", padding_mode=padding, align_corners=True)
    on_lattice = (coords == torch.round(coords)).all(dim=-1)
    if bool(on_lattice.any()):
        nearest = F.grid_sample(values, grid, mode="nearest", padding_mode=padding, align_corners=True)
        sampled = torch.where(on_lattice[:, None, :, None, None], nearest, sampled)
    return sampled.reshape(batch, channels, -1).transpose(1, 2)


def grid_resample(grid: VoxelFeatureGrid, transform: CameraPose, frame: Optional[int] = None) -> VoxelFeatureGrid:
    """
    Rigidly move a grid by ``transform`` (source frame -> target frame).

    Each output voxel center is mapped by the inverse transform into source
    coordinates and sampled trilinearly; samples outside the source cube read zero.
    A batch of grids may come with one transform per grid (leading axis B).
    """
    values = grid.values
    batched = values.dim() == 5
    volume = values if batched else values[None]
    batch = volume.shape[0]
    shape = grid.spatial_shape

    centers = voxel_centers(shape, grid.extent, dtype=volume.dtype, device=volume.device).reshape(-1, 3)
    inverse = invert(transform.to(dtype=volume.dtype, device=volume.device))
    if inverse.rotation.dim() == 2:
        if inverse.rotation.shape[0] != batch:
            raise ShapeError(f"{inverse.rotation.shape[0]} transforms for {batch} grids")
        source = centers @ inverse.rotation_matrix().transpose(-1, -2) + inverse.translation[:, None, :]
    else:
        source = inverse.apply(centers)[None].expand(batch, -1, -1)
    coords = points_to_indices(source, shape, grid.extent)
    sampled = trilinear_sample(volume, coords, padding="zeros")
    resampled = sampled.transpose(1, 2).reshape(volume.shape)
    return VoxelFeatureGrid(
        values=resampled if batched else resampled[0],
        frame=grid.frame if frame is None else frame,
        extent=grid.extent,
    )
