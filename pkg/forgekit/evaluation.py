"""
Image, depth, pose and occupancy metrics, and the evaluation report.
"""
import json
import math
from pathlib import Path
from statistics import mean, median
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel
from scipy.spatial.transform import Rotation
from torch import Tensor

from forgekit.core.config import RunConfig
from forgekit.core.errors import DatasetIOError, PreconditionError, ShapeError
from forgekit.core.logger import logger
from forgekit.datagen import voxelize
from forgekit.geometry import (
    CameraPose,
    compose,
    invert,
    points_to_indices,
    rotation_error_deg,
    trilinear_sample,
    voxel_centers,
)
from forgekit.losses import LossWeights
from forgekit.model import cameras_from_extrinsics
from forgekit.pose import RelativePoseSet
from forgekit.volume import NeuralVolume, extract_voxels, render_views

PSNR_CAP = 100.0
SCHEMA_VERSION = "1"
VARIANTS = ("forge-star", "forge-dagger", "forge")


# ============================================================
# Metrics
# ============================================================

def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: Tensor, b: Tensor) -> float:
    """10·log10(1/MSE) for images in [0, 1], capped at 100 dB."""
    _same_shape(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def masked_psnr(a: Tensor, b: Tensor, mask: Tensor) -> float:
    """PSNR over the pixels where ``mask`` is set; the cap when the mask is empty."""
    _same_shape(a, b)
    weight = (mask > 0.5).double().expand_as(a)
    count = float(weight.sum())
    if count == 0:
        return PSNR_CAP
    mse = float((((a.double() - b.double()) ** 2) * weight).sum()) / count
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype: torch.dtype = torch.float64) -> Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    kernel = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    kernel = kernel / kernel.sum()
    return kernel[:, None] * kernel[None, :]


def ssim(a: Tensor, b: Tensor, window_size: int = 11, sigma: float = 1.5) -> float:
    """
    Mean structural similarity of (C, H, W) or (B, C, H, W) images in [0, 1]
    with a Gaussian window, averaged over channels.
    """
    _same_shape(a, b)
    if a.shape[-1] < window_size or a.shape[-2] < window_size:
        raise ShapeError(f"SSIM needs images of at least {window_size}x{window_size}, got {tuple(a.shape[-2:])}")
    x = a.double().reshape(-1, 1, *a.shape[-2:])
    y = b.double().reshape(-1, 1, *b.shape[-2:])
    window = _gaussian_window(window_size, sigma).to(x.device)[None, None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    mu_x = F.conv2d(x, window)
    mu_y = F.conv2d(y, window)
    sigma_x = F.conv2d(x * x, window) - mu_x * mu_x
    sigma_y = F.conv2d(y * y, window) - mu_y * mu_y
    sigma_xy = F.conv2d(x * y, window) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    return float((numerator / denominator).mean())


class PoseErrors(NamedTuple):
    rotation_deg: float
    translation_m: float
    per_query_rotation: List[float]
    per_query_translation: List[float]


def pose_errors(gt: RelativePoseSet, pred: RelativePoseSet) -> PoseErrors:
    """Per-query geodesic rotation error and translation distance, with their means."""
    if gt.rotations.shape != pred.rotations.shape:
        raise PreconditionError(f"Pose sets differ in arity: {tuple(gt.rotations.shape)} vs {tuple(pred.rotations.shape)}")
    rotations = rotation_error_deg(gt.rotations.double(), pred.rotations.double()).reshape(-1).tolist()
    translations = (gt.translations.double() - pred.translations.double()).norm(dim=-1).reshape(-1).tolist()
    if not rotations:
        return PoseErrors(0.0, 0.0, [], [])
    return PoseErrors(mean(rotations), mean(translations), rotations, translations)


class DepthError(NamedTuple):
    value: float
    empty: bool


def depth_l1(gt_depth: Tensor, pred_depth: Tensor, gt_mask: Tensor) -> DepthError:
    """Mean |gt − pred| inside the ground-truth mask; 0 with ``empty`` set when the mask is empty."""
    _same_shape(gt_depth, pred_depth)
    inside = gt_mask > 0.5
    if not bool(inside.any()):
        logger.warning("depth_l1: empty ground-truth mask, reporting 0")
        return DepthError(0.0, True)
    difference = (gt_depth.double() - pred_depth.double()).abs()
    return DepthError(float(difference[inside].mean()), False)


def voxel_iou(pred: Tensor | np.ndarray, gt: Tensor | np.ndarray) -> float:
    pred_np = pred.cpu().numpy() if isinstance(pred, Tensor) else np.asarray(pred)
    gt_np = gt.cpu().numpy() if isinstance(gt, Tensor) else np.asarray(gt)
    if pred_np.shape != gt_np.shape:
        raise ShapeError(f"Occupancy grids differ: {pred_np.shape} vs {gt_np.shape}")
    union = np.logical_or(pred_np, gt_np).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred_np, gt_np).sum() / union)


def occupancy_at(volume: NeuralVolume, resolution: int, threshold: float) -> Tensor:
    """Thresholded density on a ``resolution``³ lattice over the volume's cube."""
    if resolution == volume.resolution:
        return extract_voxels(volume, threshold)
    centers = voxel_centers((resolution,) * 3, volume.extent, dtype=volume.density.dtype, device=volume.density.device)
    coords = points_to_indices(centers.reshape(1, -1, 3), (volume.resolution,) * 3, volume.extent)
    logits = trilinear_sample(volume.density.reshape(1, 1, *volume.density.shape[-3:]), coords, padding="border")
    return (F.softplus(logits) > threshold).reshape(resolution, resolution, resolution)


def uniform_rotation_baseline(samples: int = 20000, seed: int = 0) -> Dict[str, float]:
    """Mean and median geodesic error of uniformly random rotations (about 126.5° and 132°)."""
    rotations = Rotation.random(samples, random_state=np.random.default_rng(seed))
    angles = np.degrees(rotations.magnitude())
    return {"mean_deg": float(angles.mean()), "median_deg": float(np.median(angles))}


# ============================================================
# Report
# ============================================================

class SceneMetrics(BaseModel):
    scene_id: str
    canonical_index: int = 0
    psnr: float
    masked_psnr: float
    ssim: float
    depth_l1: float
    depth_empty: bool = False
    voxel_iou: float
    rotation_error_deg: Optional[float] = None
    translation_error_m: Optional[float] = None
    rotation_errors_deg: List[float] = []
    pre_tto_rotation_error_deg: Optional[float] = None
    pre_tto_translation_error_m: Optional[float] = None


class AggregateMetrics(BaseModel):
    psnr: float
    masked_psnr: float
    ssim: float
    depth_l1: float
    voxel_iou: float
    rotation_error_deg: Optional[float] = None
    rotation_error_median_deg: Optional[float] = None
    translation_error_m: Optional[float] = None
    pre_tto_rotation_error_deg: Optional[float] = None
    pre_tto_translation_error_m: Optional[float] = None


class EvalReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    variant: str
    config_hash: str
    dataset_id: str
    scenes: List[SceneMetrics]
    aggregate: Optional[AggregateMetrics] = None
    rotation_baseline: Optional[Dict[str, float]] = None
    lpips: Optional[float] = None


def _optional_mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [value for value in values if value is not None]
    return mean(present) if present else None


def aggregate(scenes: Sequence[SceneMetrics]) -> Optional[AggregateMetrics]:
    """Means of per-scene values; the rotation median pools every query."""
    if not scenes:
        return None
    queries = [error for scene in scenes for error in scene.rotation_errors_deg]
    return AggregateMetrics(
        psnr=mean(scene.psnr for scene in scenes),
        masked_psnr=mean(scene.masked_psnr for scene in scenes),
        ssim=mean(scene.ssim for scene in scenes),
        depth_l1=mean(scene.depth_l1 for scene in scenes),
        voxel_iou=mean(scene.voxel_iou for scene in scenes),
        rotation_error_deg=_optional_mean([scene.rotation_error_deg for scene in scenes]),
        rotation_error_median_deg=median(queries) if queries else None,
        translation_error_m=_optional_mean([scene.translation_error_m for scene in scenes]),
        pre_tto_rotation_error_deg=_optional_mean([scene.pre_tto_rotation_error_deg for scene in scenes]),
        pre_tto_translation_error_m=_optional_mean([scene.pre_tto_translation_error_m for scene in scenes]),
    )


def format_table(rows: Sequence[Dict[str, object]], columns: Sequence[str]) -> str:
    """Aligned plain-text table; floats get 4 decimals, missing values print as '-'."""
    def _cell(value: object) -> str:
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    cells = [[_cell(row.get(column)) for column in columns] for row in rows]
    widths = [max([len(column)] + [len(line[i]) for line in cells]) for i, column in enumerate(columns)]
    lines = ["  ".join(column.ljust(widths[i]) for i, column in enumerate(columns))]
    lines.append("  ".join("-" * width for width in widths))
    lines += ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(line)) for line in cells]
    return "\n".join(lines) + "\n"


REPORT_COLUMNS = ("scene", "psnr", "masked_psnr", "ssim", "rot_deg", "trans_m", "depth_l1", "voxel_iou")


def report_table(report: EvalReport) -> str:
    rows: List[Dict[str, object]] = [
        {
            "scene": scene.scene_id, "psnr": scene.psnr, "masked_psnr": scene.masked_psnr, "ssim": scene.ssim,
            "rot_deg": scene.rotation_error_deg, "trans_m": scene.translation_error_m,
            "depth_l1": scene.depth_l1, "voxel_iou": scene.voxel_iou,
        }
        for scene in report.scenes
    ]
    if report.aggregate is not None:
        total = report.aggregate
        rows.append({
            "scene": "mean", "psnr": total.psnr, "masked_psnr": total.masked_psnr, "ssim": total.ssim,
            "rot_deg": total.rotation_error_deg, "trans_m": total.translation_error_m,
            "depth_l1": total.depth_l1, "voxel_iou": total.voxel_iou,
        })
    header = f"variant {report.variant} | config {report.config_hash} | dataset {report.dataset_id}\n"
    return header + format_table(rows, REPORT_COLUMNS)


def write_report(report: EvalReport, out_dir: Path) -> Path:
    """Write ``report-<variant>.json`` and its text table; returns the JSON path."""
    out_dir = Path(out_dir)
    path = out_dir / f"report-{report.variant}.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(report.model_dump(mode="json"), fh, indent=2, sort_keys=True)
        (out_dir / f"report-{report.variant}.txt").write_text(report_table(report))
    except OSError as e:
        raise DatasetIOError(f"Error writing report to {out_dir}: {e}") from e
    return path


# ============================================================
# Variants
# ============================================================

def evaluate(model, dataset, config: RunConfig, variant: str, tto_iters: Optional[int] = None,
             scenes: Optional[Sequence[int]] = None) -> EvalReport:
    """
    Evaluate one variant over the dataset's evaluation views.

    forge-star fuses under ground-truth poses; forge-dagger uses predicted
    poses with view 0 as canonical; forge selects the canonical view and then
    refines the predicted poses by test-time optimization.
    """
    from forgekit.training import canonical_selection, collate, test_time_optimize

    if variant not in VARIANTS:
        raise PreconditionError(f"Unknown variant '{variant}'; expected one of {', '.join(VARIANTS)}")
    iters = config.eval.tto_iters if tto_iters is None else tto_iters
    weights = LossWeights.from_settings(config.loss)
    model.eval()
    device = model.device

    results: List[SceneMetrics] = []
    for index in scenes if scenes is not None else range(len(dataset)):
        episode = dataset[index]
        batch = collate([episode], device)
        rgb, mask = batch.rgb[0], batch.mask[0]
        canonical = 0
        pre_errors: Optional[PoseErrors] = None

        with torch.no_grad():
            grids = model.encode_views(batch.rgb, batch.mask)
            if variant == "forge-star":
                poses = episode.gt_relative_poses(0)
            elif variant == "forge-dagger":
                poses = model.estimate(batch.rgb, batch.mask, grids, 0).select(0)
            else:
                selection = canonical_selection(model, rgb, mask, episode.focal, weights=weights)
                canonical = selection.index
                if selection.reconstruction is not None:
                    poses = selection.reconstruction.poses
                else:
                    poses = episode.gt_relative_poses(0)

        gt_poses = episode.gt_relative_poses(canonical) if episode.input_indices[1:] else None
        if variant == "forge" and len(poses) and gt_poses is not None:
            pre_errors = pose_errors(gt_poses, RelativePoseSet(poses.rotations.cpu(), poses.translations.cpu(), canonical))
            poses = test_time_optimize(model, rgb, mask, poses, episode.focal, iters, config.eval.tto_lr, weights).poses

        with torch.no_grad():
            poses = RelativePoseSet(poses.rotations.float().to(device), poses.translations.float().to(device),
                                    poses.canonical_index)
            volume = model.reconstruct(grids, RelativePoseSet(poses.rotations[None], poses.translations[None],
                                                              poses.canonical_index)).select(0)
            relative = episode.relative_to(canonical, episode.eval_indices).to(dtype=torch.float32, device=device)
            rendered = model.render_views(volume, relative, episode.focal)
            size = episode.resolution
            depth = render_views(
                volume, cameras_from_extrinsics(model.target_extrinsics(relative), episode.focal, size),
                config.render.n_samples, (size, size),
            ).depth

        target_rgb = episode.rgb[episode.eval_indices].to(device)
        target_mask = episode.mask[episode.eval_indices].to(device)
        target_depth = episode.depth[episode.eval_indices].to(device)

        canonical_camera = episode.view_extrinsics([episode.input_indices[canonical]])
        grid_to_world = compose(
            invert(CameraPose(rotation=canonical_camera.rotation[0], translation=canonical_camera.translation[0])),
            model.canonical_pose(dtype=torch.float64).to(device=torch.device("cpu")),
        )
        gt_occupancy = voxelize(episode.scene, config.eval.voxel_resolution, config.volume.extent, grid_to_world)
        pred_occupancy = occupancy_at(volume, config.eval.voxel_resolution, config.eval.voxel_threshold)

        errors = None
        if variant != "forge-star" and gt_poses is not None:
            errors = pose_errors(gt_poses, RelativePoseSet(poses.rotations.cpu(), poses.translations.cpu(), canonical))
        depth_error = depth_l1(target_depth, depth, target_mask)
        results.append(SceneMetrics(
            scene_id=episode.scene_id,
            canonical_index=canonical,
            psnr=psnr(target_rgb, rendered.rgb),
            masked_psnr=masked_psnr(target_rgb, rendered.rgb, target_mask),
            ssim=ssim(target_rgb, rendered.rgb),
            depth_l1=depth_error.value,
            depth_empty=depth_error.empty,
            voxel_iou=voxel_iou(pred_occupancy, gt_occupancy),
            rotation_error_deg=errors.rotation_deg if errors else None,
            translation_error_m=errors.translation_m if errors else None,
            rotation_errors_deg=errors.per_query_rotation if errors else [],
            pre_tto_rotation_error_deg=pre_errors.rotation_deg if pre_errors else None,
            pre_tto_translation_error_m=pre_errors.translation_m if pre_errors else None,
        ))
        logger.info(f"eval {variant} | {episode.scene_id} | psnr {results[-1].psnr:.2f}")

    return EvalReport(
        variant=variant,
        config_hash=config.config_hash(),
        dataset_id=dataset.dataset_id,
        scenes=results,
        aggregate=aggregate(results),
        rotation_baseline=uniform_rotation_baseline(seed=config.seed) if variant != "forge-star" else None,
    )
