import math

import pytest
import torch

from forgekit.core.errors import PreconditionError, ShapeError
from forgekit.geometry import CameraPose, hemisphere, normalize_quaternion, quat_from_axis_angle, relative_pose
from forgekit.pose import (
    PairwisePoseExtractor,
    PoseEstimator,
    PoseFeatures,
    PoseRegressor,
    RelativePoseSet,
    cross_view_correlation,
    regress_poses,
    stack_pose_sets,
)


def random_extrinsics(k: int, seed: int = 0) -> CameraPose:
    generator = torch.Generator().manual_seed(seed)
    return CameraPose(
        rotation=normalize_quaternion(torch.randn(k, 4, generator=generator, dtype=torch.float64)),
        translation=torch.randn(k, 3, generator=generator, dtype=torch.float64),
    )


def test_from_absolute_skips_canonical_view():
    """Test that the pose set holds k-1 rows, one per non-canonical view."""
    poses = RelativePoseSet.from_absolute(random_extrinsics(5), canonical_index=2)
    assert len(poses) == 4
    assert poses.query_indices == [0, 1, 3, 4]


def test_all_views_inserts_identity():
    """Test that all_views puts the identity at the canonical slot."""
    poses = RelativePoseSet.from_absolute(random_extrinsics(4), canonical_index=1)
    every = poses.all_views()
    assert every.rotation.shape == (4, 4)
    assert torch.allclose(every.rotation[1], torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64))
    assert torch.allclose(every.translation[1], torch.zeros(3, dtype=torch.float64))


def test_rebase_matches_ground_truth():
    """Test that rebasing onto another canonical view matches computing it from absolute poses."""
    extrinsics = random_extrinsics(5, seed=1)
    rebased = RelativePoseSet.from_absolute(extrinsics, 0).rebase(3)
    direct = RelativePoseSet.from_absolute(extrinsics, 3)
    assert rebased.canonical_index == 3
    assert torch.allclose(hemisphere(rebased.rotations), hemisphere(direct.rotations), atol=1e-9)
    assert torch.allclose(rebased.translations, direct.translations, atol=1e-9)


def test_ground_truth_roundtrip():
    """Test that relative poses composed with the canonical extrinsic recover every view."""
    extrinsics = random_extrinsics(5, seed=2)
    poses = RelativePoseSet.from_absolute(extrinsics, 0)
    for row, index in enumerate(poses.query_indices):
        expected = relative_pose(
            CameraPose(rotation=extrinsics.rotation[0], translation=extrinsics.translation[0]),
            CameraPose(rotation=extrinsics.rotation[index], translation=extrinsics.translation[index]),
        )
        assert torch.allclose(poses.rotations[row], expected.rotation, atol=1e-9)


def test_stack_pose_sets_requires_same_canonical():
    """Test that pose sets against different canonical views cannot be stacked."""
    extrinsics = random_extrinsics(3)
    a = RelativePoseSet.from_absolute(extrinsics, 0)
    b = RelativePoseSet.from_absolute(extrinsics, 1)
    assert stack_pose_sets([a, a]).rotations.shape == (2, 2, 4)
    with pytest.raises(PreconditionError):
        stack_pose_sets([a, b])


def test_correlation_with_identical_grids_recovers_embedding():
    """Test that sharp softmax correlation of one-hot features returns the positional embedding."""
    n = 8
    features = torch.eye(n, dtype=torch.float64)[None] * 50.0
    values = torch.randn(n, 6, dtype=torch.float64)
    corr = cross_view_correlation(features, features, values, normalize="softmax")
    assert torch.allclose(corr[0], values, atol=1e-6)


def test_plain_correlation_is_a_matrix_product():
    """Test that the un-normalized variant is S times the values."""
    query = torch.randn(1, 4, 3, dtype=torch.float64)
    canonical = torch.randn(1, 4, 3, dtype=torch.float64)
    values = torch.randn(4, 6, dtype=torch.float64)
    corr = cross_view_correlation(query, canonical, values, normalize="none")
    assert torch.allclose(corr, query @ canonical.transpose(1, 2) @ values)


def test_pairwise_extractor_output():
    """Test that the pairwise extractor yields one feature row per pair, for both value choices."""
    for values in ("pe", "features"):
        extractor = PairwisePoseExtractor(voxel_channels=4, grid_size=8, channels=4, pe_channels=12, heads=2,
                                          feature_dim=16, values=values)
        out = extractor(torch.randn(3, 4, 8, 8, 8), torch.randn(3, 4, 8, 8, 8))
        assert out.shape == (3, 16)
    with pytest.raises(ShapeError):
        extractor(torch.randn(1, 4, 8, 8, 8), torch.randn(1, 4, 4, 4, 4))


def test_regressor_output_bias_is_identity_pose():
    """Test that the regressor output bias starts at the identity pose and outputs are unit quaternions."""
    regressor = PoseRegressor(feature_dim=8, hidden_dim=16).eval()
    assert regressor.mlp[-1].bias.tolist() == [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    zeros = torch.zeros(2, 3, 8)
    poses = regress_poses(regressor, PoseFeatures(zeros, zeros))
    assert torch.allclose(poses.rotations.norm(dim=-1), torch.ones(2, 3), atol=1e-6)


def test_estimator_shapes_for_every_extractor_choice(tiny_config):
    """Test that the estimator returns unit quaternions of shape (B, k-1) for each extractor selection."""
    torch.manual_seed(0)
    estimator = PoseEstimator.from_config(tiny_config).eval()
    rgb, mask = torch.rand(2, 3, 3, 16, 16), torch.ones(2, 3, 1, 16, 16)
    grids = torch.randn(2, 3, 4, 8, 8, 8)
    for extractors in ("global", "pairwise", "both"):
        estimator.extractors = extractors
        poses = estimator(rgb, mask, grids, canonical_index=1)
        assert poses.rotations.shape == (2, 2, 4)
        assert poses.translations.shape == (2, 2, 3)
        assert poses.canonical_index == 1
        assert torch.allclose(poses.rotations.norm(dim=-1), torch.ones(2, 2), atol=1e-5)


def test_inactive_extractor_contributes_zeros(tiny_config):
    """Test that with only the global extractor the pairwise half of the features is zero."""
    estimator = PoseEstimator.from_config(tiny_config).eval()
    estimator.extractors = "global"
    features = estimator.features(torch.rand(1, 3, 3, 16, 16), torch.ones(1, 3, 1, 16, 16),
                                  torch.randn(1, 3, 4, 8, 8, 8), 0)
    assert torch.count_nonzero(features.pairwise_features) == 0


def test_joint_reasoning_controls_query_interaction(tiny_config):
    """Test that query views see each other with joint reasoning and are isolated without it."""
    rgb, mask = torch.rand(1, 3, 3, 16, 16), torch.ones(1, 3, 1, 16, 16)
    changed = rgb.clone()
    changed[0, 2] = torch.rand(3, 16, 16)

    torch.manual_seed(0)
    joint = PoseEstimator.from_config(tiny_config).eval()
    before = joint.global_features(rgb, mask, 0)[0, 0]
    after = joint.global_features(changed, mask, 0)[0, 0]
    assert (before - after).abs().max() > 1e-4

    torch.manual_seed(0)
    config = tiny_config.with_overrides({"pose": {"joint_reasoning": False}})
    isolated = PoseEstimator.from_config(config).eval()
    first = isolated.global_features(rgb, mask, 0)[0, 0]
    second = isolated.global_features(changed, mask, 0)[0, 0]
    assert torch.allclose(first, second, atol=1e-5)


def test_global_features_follow_query_order(tiny_config):
    """Test that swapping two query views swaps their feature rows."""
    torch.manual_seed(0)
    estimator = PoseEstimator.from_config(tiny_config).double().eval()
    generator = torch.Generator().manual_seed(4)
    rgb = torch.rand(1, 4, 3, 16, 16, generator=generator, dtype=torch.float64)
    mask = (torch.rand(1, 4, 1, 16, 16, generator=generator, dtype=torch.float64) > 0.3).double()
    order = [0, 1, 3, 2]
    features = estimator.global_features(rgb, mask, 0)[0]
    swapped = estimator.global_features(rgb[:, order], mask[:, order], 0)[0]
    assert torch.allclose(swapped[0], features[0], atol=1e-10)
    assert torch.allclose(swapped[1], features[2], atol=1e-10)
    assert torch.allclose(swapped[2], features[1], atol=1e-10)


def test_regressor_dropout_rate():
    """Test that training-mode dropout zeroes 60% of the regressor inputs and eval mode none."""
    torch.manual_seed(0)
    regressor = PoseRegressor(feature_dim=8, hidden_dim=8)
    seen = []
    regressor.mlp.register_forward_hook(lambda module, inputs, output: seen.append(inputs[0].detach()))

    regressor.train()
    regressor(torch.ones(10000, 16))
    dropped = (seen[-1] == 0).double().mean().item()
    assert dropped == pytest.approx(0.6, abs=0.02)
    assert torch.allclose(seen[-1][seen[-1] != 0], torch.tensor(2.5))

    regressor.eval()
    regressor(torch.ones(10000, 16))
    assert torch.count_nonzero(seen[-1] == 0) == 0


def test_estimator_needs_two_views(tiny_config):
    """Test that a single view cannot be posed."""
    estimator = PoseEstimator.from_config(tiny_config)
    with pytest.raises(PreconditionError):
        estimator(torch.rand(1, 1, 3, 16, 16), torch.ones(1, 1, 1, 16, 16), torch.randn(1, 1, 4, 8, 8, 8))


def test_unknown_extractor_selection():
    """Test that an unknown extractor name is refused."""
    regressor = PoseRegressor(8, 8)
    with pytest.raises(ValueError):
        PoseEstimator(None, None, regressor, 8, extractors="local")  # type: ignore[arg-type]


def test_quarter_turn_relative_pose_angle():
    """Test that a 90 degree relative rotation is reported as such."""
    q = quat_from_axis_angle([0.0, 1.0, 0.0], math.pi / 2)
    extrinsics = CameraPose(rotation=torch.stack((torch.tensor([1.0, 0, 0, 0], dtype=torch.float64), q)),
                            translation=torch.zeros(2, 3, dtype=torch.float64))
    poses = RelativePoseSet.from_absolute(extrinsics, 0)
    assert torch.allclose(poses.rotations[0], q, atol=1e-12)
