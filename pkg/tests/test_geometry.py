import math

import pytest
import torch

from forgekit.core.errors import GeometryError, ShapeError
from forgekit.geometry import (
    Camera,
    CameraPose,
    VoxelFeatureGrid,
    compose,
    grid_resample,
    hemisphere,
    invert,
    look_at,
    make_positional_embedding,
    matrix_to_quat,
    normalize_quaternion,
    points_to_indices,
    quat_from_axis_angle,
    quat_matrix_roundtrip,
    quat_to_matrix,
    relative_pose,
    rotation_error_deg,
    trilinear_sample,
    voxel_centers,
)


def random_poses(count: int, seed: int = 0) -> CameraPose:
    generator = torch.Generator().manual_seed(seed)
    q = normalize_quaternion(torch.randn(count, 4, generator=generator, dtype=torch.float64))
    t = torch.randn(count, 3, generator=generator, dtype=torch.float64)
    return CameraPose(rotation=q, translation=t)


def test_pose_inverse_roundtrip():
    """Test that composing a pose with its inverse gives the identity on 1000 samples."""
    poses = random_poses(1000)
    identity = compose(poses, invert(poses))
    assert torch.allclose(identity.rotation, torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64), atol=1e-9)
    assert torch.allclose(identity.translation, torch.zeros(3, dtype=torch.float64), atol=1e-9)


def test_relative_pose_consistency():
    """Test that relative_pose(a, b) composed with a reproduces b."""
    a, b = random_poses(1000, seed=1), random_poses(1000, seed=2)
    rebuilt = compose(relative_pose(a, b), a)
    assert torch.allclose(rebuilt.rotation, hemisphere(b.rotation), atol=1e-9)
    assert torch.allclose(rebuilt.translation, b.translation, atol=1e-9)


def test_relative_pose_maps_camera_frames():
    """Test that the relative pose carries camera-a coordinates of a point to camera-b coordinates."""
    a, b = random_poses(1, seed=3), random_poses(1, seed=4)
    world = torch.tensor([0.3, -0.2, 0.7], dtype=torch.float64)
    in_a, in_b = a.apply(world), b.apply(world)
    assert torch.allclose(relative_pose(a, b).apply(in_a), in_b, atol=1e-9)


def test_quaternion_matrix_roundtrip():
    """Test that quaternion -> matrix -> quaternion is the identity up to hemisphere."""
    q = random_poses(1000, seed=5).rotation
    assert torch.allclose(quat_matrix_roundtrip(q), hemisphere(q), atol=1e-9)


def test_matrix_to_quat_near_pi_rotation():
    """Test that rotations close to 180 degrees keep their accuracy."""
    q = quat_from_axis_angle([1.0, 2.0, -0.5], math.pi - 1e-7)
    assert torch.allclose(matrix_to_quat(quat_to_matrix(q)), q, atol=1e-9)


def test_non_unit_quaternion_rejected():
    """Test that a quaternion of norm 2 is rejected."""
    with pytest.raises(GeometryError):
        quat_to_matrix(torch.tensor([2.0, 0.0, 0.0, 0.0], dtype=torch.float64))


def test_hemisphere_is_idempotent_and_sign_blind():
    """Test that q and -q normalize to the same hemisphere representative."""
    q = random_poses(100, seed=6).rotation
    assert torch.equal(hemisphere(q), hemisphere(-q))
    assert torch.equal(hemisphere(hemisphere(q)), hemisphere(q))


def test_rotation_error_of_known_angle():
    """Test that the geodesic error of a 30 degree rotation is 30 degrees, whatever the sign."""
    q = quat_from_axis_angle([0.0, 1.0, 0.0], math.radians(30))
    identity = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    assert rotation_error_deg(q, identity).item() == pytest.approx(30.0, abs=1e-9)
    assert rotation_error_deg(-q, identity).item() == pytest.approx(30.0, abs=1e-9)


def test_look_at_places_target_on_optical_axis():
    """Test that a look-at camera sees its target straight ahead at the right distance."""
    center = torch.tensor([0.5, -1.0, 1.2], dtype=torch.float64)
    pose = look_at(center, roll=0.7)
    in_camera = pose.apply(torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(in_camera[:2], torch.zeros(2, dtype=torch.float64), atol=1e-9)
    assert in_camera[2].item() == pytest.approx(center.norm().item(), abs=1e-9)
    assert torch.allclose(pose.center(), center, atol=1e-9)


def test_look_at_camera_axes_point_right_down_forward():
    """Test that world-up lands on camera -y and the camera center is -R^T t."""
    pose = look_at(torch.tensor([0.0, -2.0, 0.0], dtype=torch.float64))
    above = pose.apply(torch.tensor([0.0, 0.0, 0.5], dtype=torch.float64))
    assert above[1].item() == pytest.approx(-0.5, abs=1e-9)
    assert above[2].item() == pytest.approx(2.0, abs=1e-9)
    to_right = pose.apply(torch.tensor([0.5, 0.0, 0.0], dtype=torch.float64))
    assert to_right[0].item() == pytest.approx(0.5, abs=1e-9)
    r = pose.rotation_matrix()
    assert torch.allclose(pose.center(), -(r.T @ pose.translation), atol=1e-12)


def test_camera_rejects_bad_intrinsics():
    """Test that non-positive focal lengths and outside principal points are rejected."""
    pose = CameraPose.identity()
    with pytest.raises(GeometryError):
        Camera(pose=pose, focal=0.0, principal_point=(8, 8), resolution=(16, 16))
    with pytest.raises(GeometryError):
        Camera(pose=pose, focal=10.0, principal_point=(20, 8), resolution=(16, 16))


def test_positional_embedding_width_must_divide_by_six():
    """Test that a width that is not a multiple of 6 is refused."""
    with pytest.raises(ShapeError):
        make_positional_embedding(4, 4, 4, 10)


def test_positional_embedding_codes_are_distinct():
    """Test that every voxel gets a different embedding vector."""
    embedding = make_positional_embedding(4, 4, 4, 12, dtype=torch.float64)
    flat = embedding.flat
    assert flat.shape == (64, 12)
    distances = torch.cdist(flat, flat) + torch.eye(64, dtype=torch.float64)
    assert distances.min() > 1e-6


def test_voxel_centers_roundtrip_to_indices():
    """Test that voxel centers map back to integer (z, y, x) indices."""
    centers = voxel_centers((4, 6, 8), 1.0, dtype=torch.float64)
    indices = points_to_indices(centers, (4, 6, 8), 1.0)
    z, y, x = torch.meshgrid(torch.arange(4.0), torch.arange(6.0), torch.arange(8.0), indexing="ij")
    expected = torch.stack((z, y, x), dim=-1).to(torch.float64)
    assert torch.allclose(indices, expected, atol=1e-12)


def test_trilinear_sample_interpolates_between_voxels():
    """Test that a half-way sample averages two neighbours and outside reads zero."""
    values = torch.zeros(1, 1, 2, 2, 2, dtype=torch.float64)
    values[0, 0, 0, 0, 1] = 2.0
    coords = torch.tensor([[[0.0, 0.0, 0.5], [5.0, 0.0, 0.0]]], dtype=torch.float64)
    out = trilinear_sample(values, coords)
    assert out[0, 0, 0].item() == pytest.approx(1.0)
    assert out[0, 1, 0].item() == 0.0


def test_trilinear_sample_reproduces_affine_fields():
    """Test that interior samples of a linear field equal the field itself."""
    z, y, x = torch.meshgrid(torch.arange(4.0), torch.arange(5.0), torch.arange(6.0), indexing="ij")
    field = (0.5 * z - 1.25 * y + 2.0 * x + 0.75).to(torch.float64)
    values = torch.stack((field, -field))[None]
    generator = torch.Generator().manual_seed(3)
    coords = torch.rand(1, 200, 3, generator=generator, dtype=torch.float64) * torch.tensor([3.0, 4.0, 5.0], dtype=torch.float64)
    out = trilinear_sample(values, coords)
    expected = 0.5 * coords[..., 0] - 1.25 * coords[..., 1] + 2.0 * coords[..., 2] + 0.75
    assert torch.allclose(out[..., 0], expected, atol=1e-12)
    assert torch.allclose(out[..., 1], -expected, atol=1e-12)


def test_trilinear_sample_border_padding_clamps():
    """Test that border padding reads the nearest face instead of zero."""
    values = torch.arange(8.0, dtype=torch.float64).reshape(1, 1, 2, 2, 2)
    coords = torch.tensor([[[-3.0, 0.0, 0.0], [0.0, 0.0, 7.5], [1.0, 1.0, 1.0]]], dtype=torch.float64)
    out = trilinear_sample(values, coords, padding="border")[0, :, 0]
    assert out.tolist() == [0.0, 1.0, 7.0]
    assert trilinear_sample(values, coords)[0, 0, 0].item() == 0.0
    with pytest.raises(ValueError):
        trilinear_sample(values, coords, padding="reflect")


def test_trilinear_sample_gradients_reach_coordinates():
    """Test that off-lattice samples pass gradients to their coordinates."""
    values = torch.arange(8.0, dtype=torch.float64).reshape(1, 1, 2, 2, 2)
    coords = torch.tensor([[[0.3, 0.6, 0.2]]], dtype=torch.float64, requires_grad=True)
    trilinear_sample(values, coords).sum().backward()
    # values = 4z + 2y + x
    assert torch.allclose(coords.grad, torch.tensor([[[4.0, 2.0, 1.0]]], dtype=torch.float64))


def test_identity_resample_is_exact():
    """Test that the identity transform leaves a grid bit-identical."""
    values = torch.randn(3, 6, 6, 6, dtype=torch.float64)
    moved = grid_resample(VoxelFeatureGrid(values=values), CameraPose.identity())
    assert torch.equal(moved.values, values)


def test_quarter_turn_resample_is_a_permutation():
    """Test that a 90 degree rotation about z permutes voxels exactly."""
    values = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    transform = CameraPose(rotation=quat_from_axis_angle([0.0, 0.0, 1.0], math.pi / 2),
                           translation=torch.zeros(3, dtype=torch.float64))
    moved = grid_resample(VoxelFeatureGrid(values=values), transform)
    expected = values.flip(-2).transpose(-1, -2)
    assert torch.equal(moved.values, expected)


def test_translation_out_of_cube_reads_zero():
    """Test that moving a grid by more than its extent leaves only zeros."""
    values = torch.ones(1, 4, 4, 4, dtype=torch.float64)
    transform = CameraPose(rotation=torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64),
                           translation=torch.tensor([2.0, 0.0, 0.0], dtype=torch.float64))
    moved = grid_resample(VoxelFeatureGrid(values=values), transform)
    assert torch.count_nonzero(moved.values) == 0


def test_batched_resample_uses_one_transform_per_grid():
    """Test that a batch of grids with per-grid transforms matches resampling one by one."""
    values = torch.randn(2, 2, 4, 4, 4, dtype=torch.float64)
    transforms = random_poses(2, seed=8)
    transforms = CameraPose(rotation=transforms.rotation, translation=transforms.translation * 0.1)
    batched = grid_resample(VoxelFeatureGrid(values=values), transforms).values
    for index in range(2):
        single = grid_resample(
            VoxelFeatureGrid(values=values[index]),
            CameraPose(rotation=transforms.rotation[index], translation=transforms.translation[index]),
        ).values
        assert torch.allclose(batched[index], single, atol=1e-12)
