"""
Training objectives: the 2D photometric loss, its multi-view mean, the
cross-view consistency loss and the relative pose loss.
"""
from typing import Callable, Optional, Protocol, Sequence, Tuple

import torch
from pydantic import BaseModel, Field
from torch import Tensor

from forgekit.core.config import LossSettings
from forgekit.core.errors import PreconditionError, ShapeError
from forgekit.geometry import hemisphere
from forgekit.pose import RelativePoseSet

PerceptualLoss = Callable[[Tensor, Tensor], Tensor]


class LossWeights(BaseModel):
    lambda_img: float = Field(default=5.0, ge=0.0)
    lambda_p: float = Field(default=0.02, ge=0.0)
    lambda_pose: float = Field(default=1.0, ge=0.0)
    perceptual_enabled: bool = False

    @classmethod
    def from_settings(cls, settings: LossSettings) -> "LossWeights":
        return cls(
            lambda_img=settings.lambda_img,
            lambda_p=settings.lambda_p,
            lambda_pose=settings.lambda_pose,
            perceptual_enabled=settings.perceptual_enabled,
        )


class RenderPipeline(Protocol):
    def __call__(self, subset: Sequence[int], targets: Sequence[int],
                 poses: RelativePoseSet) -> Tuple[Tensor, Tensor]:
        """
        Build a volume from the ``subset`` views with ``poses`` (all views,
        rebased on ``subset[0]``) and return predicted (rgb, mask) of ``targets``.
        """
        ...


def _check_same(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_l2d(gt_mask: Tensor, pred_mask: Tensor, gt_img: Tensor, pred_img: Tensor, weights: LossWeights) -> Tensor:
    """Mask MAE + λ_img · image MAE."""
    _check_same("mask", gt_mask, pred_mask)
    _check_same("image", gt_img, pred_img)
    return (gt_mask - pred_mask).abs().mean() + weights.lambda_img * (gt_img - pred_img).abs().mean()


def loss_mv(gt_mask: Tensor, pred_mask: Tensor, gt_img: Tensor, pred_img: Tensor, weights: LossWeights,
            perceptual: Optional[PerceptualLoss] = None) -> Tensor:
    """
    Mean over the leading view axis of L_2D plus λ_p times the perceptual term.

    The perceptual term is zero unless ``weights.perceptual_enabled``, in which
    case a ``perceptual`` callable must be supplied.
    """
    if weights.perceptual_enabled and perceptual is None:
        raise PreconditionError("Perceptual loss is enabled but no perceptual network was provided")
    n_views = gt_img.shape[0]
    if n_views < 1:
        raise PreconditionError("loss_mv needs at least one view")

    total = gt_img.new_zeros(())
    for view in range(n_views):
        term = loss_l2d(gt_mask[view], pred_mask[view], gt_img[view], pred_img[view], weights)
        if weights.perceptual_enabled and perceptual is not None:
            term = term + weights.lambda_p * perceptual(pred_img[view], gt_img[view])
        total = total + term
    return total / n_views


def split_views(n_views: int, split_n: int) -> Tuple[list[int], list[int]]:
    if not 1 <= split_n < n_views:
        raise PreconditionError(f"split_n must satisfy 1 <= split_n < k, got split_n={split_n}, k={n_views}")
    return list(range(split_n)), list(range(split_n, n_views))


def loss_corr(pipeline: RenderPipeline, gt_mask: Tensor, gt_img: Tensor, poses: RelativePoseSet,
              split_n: int, weights: LossWeights) -> Tensor:
    """
    Render the views left out of the first ``split_n`` from a volume built on
    the first ``split_n``, and vice versa; mean of both L_2D values.
    """
    first, second = split_views(gt_img.shape[0], split_n)
    total = gt_img.new_zeros(())
    for subset, targets in ((first, second), (second, first)):
        pred_img, pred_mask = pipeline(subset, targets, poses.rebase(subset[0]))
        total = total + loss_l2d(gt_mask[targets], pred_mask, gt_img[targets], pred_img, weights)
    return total / 2


def loss_pose(gt: RelativePoseSet, pred: RelativePoseSet) -> Tensor:
    """Mean over queries of ‖q − q̂‖² (both hemisphere-fixed) + ‖t − t̂‖²."""
    if gt.rotations.shape != pred.rotations.shape or gt.translations.shape != pred.translations.shape:
        raise PreconditionError(
            f"Pose sets differ in arity: {tuple(gt.rotations.shape)} vs {tuple(pred.rotations.shape)}"
        )
    if gt.canonical_index != pred.canonical_index:
        raise PreconditionError("Pose sets use different canonical views")
    target = hemisphere(gt.rotations.to(pred.rotations.dtype))
    rotation = (hemisphere(pred.rotations) - target).pow(2).sum(dim=-1)
    translation = (pred.translations - gt.translations.to(pred.translations.dtype)).pow(2).sum(dim=-1)
    return (rotation + translation).mean()


def is_finite(value: Tensor) -> bool:
    return bool(torch.isfinite(value).all())
