import pytest
import torch

from forgekit.core.errors import PreconditionError, ShapeError
from forgekit.losses import LossWeights, is_finite, loss_corr, loss_l2d, loss_mv, loss_pose, split_views
from forgekit.pose import RelativePoseSet


def images(n_views: int = 3, seed: int = 0):
    generator = torch.Generator().manual_seed(seed)
    rgb = torch.rand(n_views, 3, 8, 8, generator=generator, dtype=torch.float64)
    mask = (torch.rand(n_views, 1, 8, 8, generator=generator, dtype=torch.float64) > 0.5).to(torch.float64)
    return rgb, mask


def test_losses_are_zero_on_perfect_predictions():
    """Test that L_2D and L_mv are exactly zero when predictions equal the targets."""
    rgb, mask = images()
    weights = LossWeights()
    assert loss_l2d(mask[0], mask[0], rgb[0], rgb[0], weights).item() == 0.0
    assert loss_mv(mask, mask, rgb, rgb, weights).item() == 0.0


def test_l2d_weights_the_image_term():
    """Test that L_2D is mask MAE plus lambda_img times image MAE."""
    rgb, mask = images(1)
    weights = LossWeights(lambda_img=5.0)
    loss = loss_l2d(mask[0], mask[0] * 0, rgb[0], rgb[0] + 0.1, weights)
    assert loss.item() == pytest.approx(mask.mean().item() + 5.0 * 0.1)


def test_l2d_rejects_mismatched_shapes():
    """Test that predictions and targets of different shapes raise a shape error."""
    rgb, mask = images(1)
    with pytest.raises(ShapeError):
        loss_l2d(mask[0], mask[0], rgb[0], rgb[0, :, :4], LossWeights())


def test_loss_mv_is_the_view_mean():
    """Test that L_mv averages the per-view losses."""
    rgb, mask = images(2)
    pred = rgb.clone()
    pred[1] += 0.2
    weights = LossWeights()
    expected = (loss_l2d(mask[0], mask[0], rgb[0], pred[0], weights)
                + loss_l2d(mask[1], mask[1], rgb[1], pred[1], weights)) / 2
    assert loss_mv(mask, mask, rgb, pred, weights).item() == pytest.approx(expected.item())


def test_perceptual_term_needs_a_network():
    """Test that enabling the perceptual term without a network is a precondition error."""
    rgb, mask = images(1)
    with pytest.raises(PreconditionError):
        loss_mv(mask, mask, rgb, rgb, LossWeights(perceptual_enabled=True))
    term = loss_mv(mask, mask, rgb, rgb, LossWeights(perceptual_enabled=True, lambda_p=0.5),
                   perceptual=lambda a, b: a.new_tensor(2.0))
    assert term.item() == pytest.approx(1.0)


def test_split_views_bounds():
    """Test that split_n must leave at least one view on each side."""
    assert split_views(5, 2) == ([0, 1], [2, 3, 4])
    for bad in (0, 5):
        with pytest.raises(PreconditionError):
            split_views(5, bad)


def test_loss_corr_runs_both_directions_with_rebased_poses():
    """Test that L_corr renders each half from the other, rebased on the subset's first view."""
    rgb, mask = images(4)
    poses = RelativePoseSet(
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]] * 3, dtype=torch.float64),
        translations=torch.arange(9, dtype=torch.float64).reshape(3, 3) * 0.1,
    )
    calls = []

    def pipeline(subset, targets, rebased):
        calls.append((list(subset), list(targets), rebased.canonical_index))
        return rgb[targets], mask[targets]

    loss = loss_corr(pipeline, mask, rgb, poses, split_n=2, weights=LossWeights())
    assert loss.item() == 0.0
    assert calls == [([0, 1], [2, 3], 0), ([2, 3], [0, 1], 2)]


def test_loss_corr_averages_the_two_directions():
    """Test that L_corr is the mean of the two directional L_2D values."""
    rgb, mask = images(2)
    poses = RelativePoseSet(torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64),
                            torch.zeros(1, 3, dtype=torch.float64))

    def pipeline(subset, targets, rebased):
        offset = 0.1 if subset == [0] else 0.3
        return rgb[targets] + offset, mask[targets]

    loss = loss_corr(pipeline, mask, rgb, poses, split_n=1, weights=LossWeights(lambda_img=1.0))
    assert loss.item() == pytest.approx(0.2)


def test_pose_loss_is_zero_under_hemisphere_fixing():
    """Test that L_pose ignores the sign ambiguity of quaternions."""
    q = torch.nn.functional.normalize(torch.randn(4, 4, dtype=torch.float64), dim=-1)
    t = torch.randn(4, 3, dtype=torch.float64)
    assert loss_pose(RelativePoseSet(q, t), RelativePoseSet(-q, t)).item() == 0.0


def test_pose_loss_value():
    """Test that L_pose sums squared quaternion and translation errors, averaged over queries."""
    q = torch.tensor([[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    t = torch.zeros(2, 3, dtype=torch.float64)
    shifted = t.clone()
    shifted[0, 0] = 2.0
    assert loss_pose(RelativePoseSet(q, t), RelativePoseSet(q, shifted)).item() == pytest.approx(2.0)


def test_pose_loss_arity_mismatch():
    """Test that pose sets of different sizes cannot be compared."""
    q = torch.tensor([[1.0, 0.0, 0.0, 0.0]] * 2, dtype=torch.float64)
    with pytest.raises(PreconditionError):
        loss_pose(RelativePoseSet(q, torch.zeros(2, 3)), RelativePoseSet(q[:1], torch.zeros(1, 3)))


def test_is_finite():
    """Test the finiteness guard used by the training loop."""
    assert is_finite(torch.tensor(1.0))
    assert not is_finite(torch.tensor(float("nan")))


def test_loss_weights_must_be_non_negative():
    """Test that negative weights fail validation."""
    with pytest.raises(ValueError):
        LossWeights(lambda_img=-1.0)
