"""
Three-stage training, test-time pose optimization and canonical view selection.

Stage 1 trains the reconstruction path under ground-truth poses, stage 2 the
pose estimator alone (global, pairwise, then both), stage 3 everything end
to end.
"""
import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, Field, field_validator
from torch import Tensor
from tqdm import tqdm

from forgekit.core.checkpoint import checkpoint_path, load_checkpoint, restore_blocks, save_checkpoint
from forgekit.core.config import RunConfig
from forgekit.core.errors import NumericalError, PreconditionError
from forgekit.core.logger import log_duration, logger
from forgekit.datagen import Episode, SceneDataset
from forgekit.evaluation import psnr
from forgekit.geometry import CameraPose, normalize_quaternion
from forgekit.losses import LossWeights, loss_corr, loss_l2d, loss_mv, loss_pose
from forgekit.model import ForgeModel, Reconstruction
from forgekit.pose import RelativePoseSet

LOSS_LOG = "loss_log.csv"
LOSS_COLUMNS = ("iteration", "stage", "total", "mv", "corr", "pose")


class TrainingStage(str, Enum):
    RECONSTRUCTION = "1"
    POSE = "2"
    END_TO_END = "3"


STAGE_PREREQUISITES: Dict[TrainingStage, Tuple[str, ...]] = {
    TrainingStage.RECONSTRUCTION: (),
    TrainingStage.POSE: ("1",),
    TrainingStage.END_TO_END: ("1", "2"),
}

RECONSTRUCTION_BLOCKS = ("encoder", "fusion", "decoder", "head")


class StageConfig(BaseModel):
    stage: TrainingStage
    name: str
    iterations: int = Field(ge=0)
    batch_size: int = Field(ge=1)
    lr: float = Field(gt=0.0)
    milestones: List[int] = []
    trainable: List[str]
    seed: int = 0
    extractors: str = "both"
    random_canonical: bool = False
    pose_dropout: bool = True

    @field_validator("milestones")
    @classmethod
    def _sorted(cls, value: List[int]) -> List[int]:
        return sorted(value)


def stage_configs(config: RunConfig, stage: TrainingStage) -> List[StageConfig]:
    """Schedules for one stage; stage 2 expands into its three sub-phases."""
    train = config.train
    if stage == TrainingStage.RECONSTRUCTION:
        return [StageConfig(
            stage=stage, name="stage1", iterations=train.stage1_iterations, batch_size=train.batch_size,
            lr=train.stage1_lr, milestones=train.stage1_milestones, trainable=list(RECONSTRUCTION_BLOCKS),
            seed=config.seed,
        )]
    if stage == TrainingStage.END_TO_END:
        return [StageConfig(
            stage=stage, name="stage3", iterations=train.stage3_iterations, batch_size=train.batch_size,
            lr=train.stage3_lr, milestones=train.stage3_milestones,
            trainable=list(RECONSTRUCTION_BLOCKS) + ["pose"], seed=config.seed,
            extractors=config.pose.extractors, random_canonical=train.random_canonical,
            pose_dropout=train.stage3_dropout,
        )]

    phases: List[Tuple[str, List[str]]] = []
    if config.pose.extractors in ("global", "both"):
        phases.append(("global", ["pose.global_extractor", "pose.regressor"]))
    if config.pose.extractors in ("pairwise", "both"):
        phases.append(("pairwise", ["pose.pairwise_extractor", "pose.regressor"]))
    if config.pose.extractors == "both":
        phases.append(("both", ["pose"]))

    share = train.stage2_iterations // len(phases)
    configs = []
    for position, (extractors, trainable) in enumerate(phases):
        iterations = share if position < len(phases) - 1 else train.stage2_iterations - share * (len(phases) - 1)
        scale = iterations / max(train.stage2_iterations, 1)
        configs.append(StageConfig(
            stage=stage, name=f"stage2-{extractors}", iterations=iterations, batch_size=train.batch_size,
            lr=train.stage2_lr, milestones=[int(m * scale) for m in train.stage2_milestones],
            trainable=trainable, seed=config.seed + position, extractors=extractors,
            random_canonical=train.random_canonical,
        ))
    return configs


@dataclass
class EpisodeBatch:
    rgb: Tensor  # (B, k, 3, H, W)
    mask: Tensor  # (B, k, 1, H, W)
    extrinsics: CameraPose  # (B, k, ·)
    focal: float

    @property
    def n_views(self) -> int:
        return self.rgb.shape[1]


def collate(episodes: Sequence[Episode], device: Optional[torch.device] = None) -> EpisodeBatch:
    """Stack the input views of several episodes."""
    focal = {episode.focal for episode in episodes}
    if len(focal) != 1:
        raise PreconditionError("All episodes in a batch must share the same intrinsics")
    rgb = torch.stack([episode.rgb[episode.input_indices] for episode in episodes])
    mask = torch.stack([episode.mask[episode.input_indices] for episode in episodes])
    rotation = torch.stack([episode.extrinsics.rotation[episode.input_indices] for episode in episodes])
    translation = torch.stack([episode.extrinsics.translation[episode.input_indices] for episode in episodes])
    return EpisodeBatch(
        rgb=rgb.to(device),
        mask=mask.to(device),
        extrinsics=CameraPose(rotation=rotation.to(device), translation=translation.to(device)),
        focal=focal.pop(),
    )


@dataclass
class LossTerms:
    total: Tensor
    mv: float = 0.0
    corr: float = 0.0
    pose: float = 0.0


def set_trainable(model: ForgeModel, names: Sequence[str]) -> List[nn.Parameter]:
    """Freeze everything except the named submodules; frozen ones go to eval mode."""
    model.requires_grad_(False)
    model.eval()
    selected: List[nn.Parameter] = []
    for name in names:
        module = model.get_submodule(name)
        module.requires_grad_(True)
        module.train()
        selected.extend(module.parameters())
    return selected


class Trainer:
    """Owns the model, its optimizer and the seeded random stream for one run directory."""

    def __init__(self, config: RunConfig, dataset: SceneDataset, run_dir: Path,
                 device: Optional[torch.device] = None, model: Optional[ForgeModel] = None):
        if len(dataset) == 0:
            raise PreconditionError(f"Dataset {dataset.root} has no scenes")
        self.config = config
        self.dataset = dataset
        self.run_dir = Path(run_dir)
        self.device = device or torch.device("cpu")
        self.weights = LossWeights.from_settings(config.loss)
        torch.manual_seed(config.seed)
        self.model = (model or ForgeModel(config)).to(self.device)

    # -------------------------------------------------------- bookkeeping

    def check_prerequisites(self, stage: TrainingStage) -> None:
        for required in STAGE_PREREQUISITES[stage]:
            path = checkpoint_path(self.run_dir, required)
            if not path.exists():
                raise PreconditionError(f"Stage {stage.value} needs the stage {required} checkpoint at {path}")

    def _log_row(self, row: Dict[str, object]) -> None:
        path = self.run_dir / LOSS_LOG
        is_new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
            if is_new:
                writer.writeheader()
            writer.writerow(row)

    # -------------------------------------------------------- loss assembly

    def _reconstruction_losses(self, batch: EpisodeBatch, grids: Tensor, poses: RelativePoseSet,
                               generator: torch.Generator) -> Tuple[Tensor, float, float]:
        """L_mv (+ L_corr) summed over scenes, averaged over the batch."""
        volumes = self.model.reconstruct(grids, poses)
        mv_total = grids.new_zeros(())
        corr_total = grids.new_zeros(())
        for b in range(grids.shape[0]):
            scene_poses = poses.select(b)
            rendered = self.model.render_views(volumes.select(b), scene_poses.all_views(), batch.focal, generator)
            mv_total = mv_total + loss_mv(batch.mask[b], rendered.mask_refined, batch.rgb[b], rendered.rgb, self.weights)
            if self.config.loss.ccl_enabled:
                pipeline = self._subset_pipeline(grids[b], batch.focal, generator)
                corr_total = corr_total + loss_corr(
                    pipeline, batch.mask[b], batch.rgb[b], scene_poses, self.config.model.split_n, self.weights
                )
        n = grids.shape[0]
        return (mv_total + corr_total) / n, float(mv_total) / n, float(corr_total) / n

    def _subset_pipeline(self, grids: Tensor, focal: float, generator: torch.Generator):
        def pipeline(subset: Sequence[int], targets: Sequence[int], poses: RelativePoseSet):
            every = poses.all_views()
            local = RelativePoseSet(
                rotations=every.rotation[list(subset[1:])],
                translations=every.translation[list(subset[1:])],
                canonical_index=0,
            )
            volume = self.model.reconstruct(grids[list(subset)][None], _batched(local)).select(0)
            relative = CameraPose(rotation=every.rotation[list(targets)], translation=every.translation[list(targets)])
            rendered = self.model.render_views(volume, relative, focal, generator)
            return rendered.rgb, rendered.mask_refined

        return pipeline

    def step_losses(self, stage_config: StageConfig, batch: EpisodeBatch, canonical_index: int,
                    generator: torch.Generator) -> LossTerms:
        gt = RelativePoseSet.from_absolute(batch.extrinsics, canonical_index)
        gt = RelativePoseSet(gt.rotations.float(), gt.translations.float(), canonical_index)

        if stage_config.stage == TrainingStage.RECONSTRUCTION:
            grids = self.model.encode_views(batch.rgb, batch.mask)
            total, mv, corr = self._reconstruction_losses(batch, grids, gt, generator)
            return LossTerms(total=total, mv=mv, corr=corr)

        if stage_config.stage == TrainingStage.POSE:
            with torch.no_grad():
                grids = self.model.encode_views(batch.rgb, batch.mask)
            pred = self.model.estimate(batch.rgb, batch.mask, grids, canonical_index)
            pose = self.weights.lambda_pose * loss_pose(gt, pred)
            return LossTerms(total=pose, pose=float(pose))

        grids = self.model.encode_views(batch.rgb, batch.mask)
        pred = self.model.estimate(batch.rgb, batch.mask, grids, canonical_index)
        reconstruction, mv, corr = self._reconstruction_losses(batch, grids, pred, generator)
        pose = self.weights.lambda_pose * loss_pose(gt, pred)
        return LossTerms(total=reconstruction + pose, mv=mv, corr=corr, pose=float(pose))

    # -------------------------------------------------------- loops

    def train_phase(self, stage_config: StageConfig) -> Path:
        generator = torch.Generator().manual_seed(stage_config.seed)
        parameters = set_trainable(self.model, stage_config.trainable)
        self.model.pose.extractors = stage_config.extractors
        if not stage_config.pose_dropout:
            self.model.pose.regressor.dropout.eval()

        optimizer = torch.optim.Adam(parameters, lr=stage_config.lr)
        scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=stage_config.milestones, gamma=0.5)
        n_views = self.dataset.views
        path = checkpoint_path(self.run_dir, stage_config.stage.value)
        train_every = self.config.train

        progress = tqdm(range(1, stage_config.iterations + 1), desc=stage_config.name, unit="it", leave=False)
        for iteration in progress:
            scenes = torch.randint(len(self.dataset), (stage_config.batch_size,), generator=generator).tolist()
            batch = collate([self.dataset[index] for index in scenes], self.device)
            canonical = 0
            if stage_config.random_canonical:
                canonical = int(torch.randint(n_views, (1,), generator=generator))

            terms = self.step_losses(stage_config, batch, canonical, generator)
            if not torch.isfinite(terms.total):
                raise NumericalError(
                    f"{stage_config.name}: non-finite loss at iteration {iteration} "
                    f"(mv={terms.mv}, corr={terms.corr}, pose={terms.pose})"
                )
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            optimizer.step()
            scheduler.step()

            self._log_row({
                "iteration": iteration, "stage": stage_config.name, "total": f"{float(terms.total):.6f}",
                "mv": f"{terms.mv:.6f}", "corr": f"{terms.corr:.6f}", "pose": f"{terms.pose:.6f}",
            })
            if iteration % train_every.log_every == 0:
                logger.info(f"{stage_config.name} | iteration {iteration} | loss {float(terms.total):.4f}")
            if iteration % train_every.checkpoint_every == 0:
                save_checkpoint(path, self.model.blocks(), stage_config.stage.value, self.config, optimizer, iteration)
                self.validate()

        self.model.pose.extractors = self.config.pose.extractors
        return save_checkpoint(path, self.model.blocks(), stage_config.stage.value, self.config, optimizer,
                               stage_config.iterations)

    def train_stage(self, stage: TrainingStage) -> Path:
        """Run one stage from its prerequisite checkpoint and write ``stage<N>.ckpt``."""
        self.check_prerequisites(stage)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        previous = STAGE_PREREQUISITES[stage]
        if previous:
            restore_blocks(load_checkpoint(checkpoint_path(self.run_dir, previous[-1])), self.model.blocks(), self.config)

        path = checkpoint_path(self.run_dir, stage.value)
        with log_duration(f"train stage {stage.value}"):
            for stage_config in stage_configs(self.config, stage):
                logger.info(f"{stage_config.name}: {stage_config.iterations} iterations, trainable {stage_config.trainable}")
                path = self.train_phase(stage_config)
        self.model.eval()
        return path

    def validate(self) -> Optional[float]:
        """Mean PSNR of the held-out views of the first validation scenes under GT poses."""
        count = min(self.config.train.val_scenes, len(self.dataset))
        if count == 0:
            return None
        was_training = self.model.training
        self.model.eval()
        scores = []
        with torch.no_grad():
            for index in range(count):
                episode = self.dataset[index]
                batch = collate([episode], self.device)
                grids = self.model.encode_views(batch.rgb, batch.mask)
                gt = RelativePoseSet.from_absolute(batch.extrinsics, 0)
                volume = self.model.reconstruct(grids, gt).select(0)
                relative = episode.relative_to(0, episode.eval_indices).to(dtype=torch.float32, device=self.device)
                rendered = self.model.render_views(volume, relative, episode.focal)
                target = episode.rgb[episode.eval_indices].to(self.device)
                scores.append(float(psnr(target, rendered.rgb)))
        self.model.train(was_training)
        score = sum(scores) / len(scores)
        logger.info(f"validation PSNR {score:.2f} dB over {count} scenes")
        return score


def _batched(poses: RelativePoseSet) -> RelativePoseSet:
    return RelativePoseSet(poses.rotations[None], poses.translations[None], poses.canonical_index)


# ============================================================
# Test-time optimization
# ============================================================

@dataclass
class TTOResult:
    poses: RelativePoseSet
    initial_loss: float
    final_loss: float
    last_loss: float = float("nan")
    history: List[float] = field(default_factory=list)


def photometric_objective(model: ForgeModel, grids: Tensor, rgb: Tensor, mask: Tensor,
                          poses: RelativePoseSet, focal: float, weights: LossWeights) -> Tensor:
    """Σ L_2D over the input views rendered from the volume fused under ``poses``."""
    volume = model.reconstruct(grids[None], _batched(poses)).select(0)
    rendered = model.render_views(volume, poses.all_views(), focal)
    return sum(
        (loss_l2d(mask[view], rendered.mask_refined[view], rgb[view], rendered.rgb[view], weights)
         for view in range(rgb.shape[0])),
        start=rgb.new_zeros(()),
    )


def test_time_optimize(model: ForgeModel, rgb: Tensor, mask: Tensor, init_poses: RelativePoseSet,
                       focal: float, iters: int, lr: float = 2e-3,
                       weights: Optional[LossWeights] = None) -> TTOResult:
    """
    Refine relative poses by gradient descent on the input-view photometric
    loss with every network weight frozen. The quaternion is re-normalized
    after each step; the best iterate seen is returned.
    """
    weights = weights or LossWeights()
    if iters == 0:
        return TTOResult(poses=init_poses, initial_loss=float("nan"), final_loss=float("nan"))

    was_training = model.training
    model.eval()
    flags = [parameter.requires_grad for parameter in model.parameters()]
    model.requires_grad_(False)
    try:
        with torch.no_grad():
            grids = model.encode_views(rgb[None], mask[None])[0]
        rotation = init_poses.rotations.detach().clone().to(device=grids.device, dtype=grids.dtype).requires_grad_(True)
        translation = init_poses.translations.detach().clone().to(device=grids.device, dtype=grids.dtype).requires_grad_(True)
        optimizer = torch.optim.Adam([rotation, translation], lr=lr)

        history: List[float] = []
        best_loss, best = float("inf"), init_poses
        for step in range(iters + 1):
            poses = RelativePoseSet(normalize_quaternion(rotation), translation, init_poses.canonical_index)
            loss = photometric_objective(model, grids, rgb, mask, poses, focal, weights)
            value = float(loss)
            if not torch.isfinite(loss):
                raise NumericalError(f"Test-time optimization diverged at step {step}")
            history.append(value)
            if value < best_loss:
                best_loss, best = value, poses.detach()
            if step == iters:
                break
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                rotation.copy_(normalize_quaternion(rotation))
    finally:
        for parameter, flag in zip(model.parameters(), flags):
            parameter.requires_grad_(flag)
        model.train(was_training)

    logger.info(f"test-time optimization: loss {history[0]:.4f} -> {history[-1]:.4f} after {iters} steps (best {best_loss:.4f})")
    return TTOResult(poses=best, initial_loss=history[0], final_loss=best_loss, last_loss=history[-1], history=history)


# ============================================================
# Canonical view selection
# ============================================================

def select_canonical(losses: Sequence[float]) -> int:
    """Index of the smallest loss; ties go to the lowest index."""
    best = 0
    for index, value in enumerate(losses):
        if value < losses[best]:
            best = index
    return best


@dataclass
class CanonicalSelection:
    index: int
    losses: List[float]
    reconstruction: Optional[Reconstruction] = None


def canonical_selection(model: ForgeModel, rgb: Tensor, mask: Tensor, focal: float,
                        criterion: Optional[Callable[[int], float]] = None,
                        weights: Optional[LossWeights] = None) -> CanonicalSelection:
    """
    Run inference once per candidate canonical view and keep the one with the
    lowest summed input-view L_2D. ``criterion`` replaces that measurement.
    """
    weights = weights or LossWeights()
    n_views = rgb.shape[0]
    if n_views == 1:
        return CanonicalSelection(index=0, losses=[0.0])

    results: Dict[int, Reconstruction] = {}
    grids: Optional[Tensor] = None

    def _measure(index: int) -> float:
        nonlocal grids
        with torch.no_grad():
            if grids is None:
                grids = model.encode_views(rgb[None], mask[None])
            poses = model.estimate(rgb[None], mask[None], grids, index)
            volume = model.reconstruct(grids, poses).select(0)
            results[index] = Reconstruction(volume=volume, poses=poses.select(0))
            return float(photometric_objective(model, grids[0], rgb, mask, poses.select(0), focal, weights))

    measure = criterion or _measure
    losses = [float(measure(index)) for index in range(n_views)]
    index = select_canonical(losses)
    return CanonicalSelection(index=index, losses=losses, reconstruction=results.get(index))
