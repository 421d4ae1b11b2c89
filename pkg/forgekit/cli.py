"""
Command-line surface: dataset generation, staged training, evaluation,
rendering/export and ablation sweeps.

Every command resolves the layered configuration, prints its hash and
returns the exit code of the first ``ForgeError`` it hits.
"""
import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from forgekit import __version__
from forgekit.core.checkpoint import checkpoint_path, load_checkpoint, restore_blocks
from forgekit.core.config import RunConfig
from forgekit.core.config_manager import write_config_file
from forgekit.core.errors import CheckpointError, ConfigError, DatasetIOError, ForgeError
from forgekit.core.logger import configure_logging, log_duration, logger
from forgekit.datagen import SceneDataset, make_dataset
from forgekit.evaluation import VARIANTS, EvalReport, evaluate, format_table, report_table, write_report
from forgekit.geometry import CameraPose, compose, invert, look_at
from forgekit.model import ForgeModel
from forgekit.pose import RelativePoseSet
from forgekit.training import TrainingStage, Trainer, collate
from forgekit.volume import extract_voxels, write_occupancy

STAGE_CHOICES = ("1", "2", "3", "all")


class ForgeArgumentParser(argparse.ArgumentParser):
    """Usage errors become ``ConfigError`` so they share the exit-code contract."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


# ============================================================
# Shared helpers
# ============================================================

def _device(name: str) -> torch.device:
    if name == "cuda" and not torch.cuda.is_available():
        raise ConfigError("CUDA was requested but is not available")
    return torch.device(name)


def _run_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    return Path(args.run_dir or config.paths.run_dir)


def _dataset(args: argparse.Namespace, config: RunConfig) -> SceneDataset:
    return SceneDataset(Path(args.data or config.paths.dataset))


def latest_checkpoint(run_dir: Path) -> Path:
    for stage in ("3", "2", "1"):
        path = checkpoint_path(run_dir, stage)
        if path.exists():
            return path
    raise CheckpointError(f"No checkpoint found in {run_dir}")


def load_model(config: RunConfig, path: Path, device: torch.device) -> Tuple[ForgeModel, str]:
    """Build the network for ``config`` and load every block from ``path``."""
    checkpoint = load_checkpoint(path)
    model = ForgeModel(config)
    restore_blocks(checkpoint, model.blocks(), config)
    model.to(device).eval()
    logger.info(f"Loaded stage {checkpoint.stage} checkpoint {path} (config {checkpoint.config_hash})")
    return model, checkpoint.stage


def _stages(selection: str) -> List[TrainingStage]:
    if selection == "all":
        return list(TrainingStage)
    return [TrainingStage(selection)]


# ============================================================
# gen-data
# ============================================================

def cmd_gen_data(args: argparse.Namespace, config: RunConfig) -> int:
    settings = config.datagen
    if args.workers is not None:
        settings = settings.model_copy(update={"workers": args.workers})
    n_scenes = args.scenes if args.scenes is not None else settings.scenes
    views = args.views if args.views is not None else config.model.views
    seed = args.seed if args.seed is not None else config.seed

    manifest = make_dataset(n_scenes, views, seed, Path(args.out), settings)
    print(f"manifest {manifest}")
    print(f"manifest_hash {_file_hash(manifest)}")
    return 0


def _file_hash(path: Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
    except OSError as e:
        raise DatasetIOError(f"Cannot read {path}: {e}") from e


# ============================================================
# train
# ============================================================

def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    run_dir = _run_dir(args, config)
    trainer = Trainer(config, _dataset(args, config), run_dir, _device(args.device))
    stages = _stages(args.stage)
    trainer.check_prerequisites(stages[0])
    write_config_file(config, run_dir / "config.cfg")
    for stage in stages:
        path = trainer.train_stage(stage)
        print(f"checkpoint {path}")
    return 0


# ============================================================
# eval
# ============================================================

def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    variant = args.variant or config.eval.variant
    if variant not in VARIANTS:
        raise ConfigError(f"Unknown variant '{variant}'; expected one of {', '.join(VARIANTS)}")
    run_dir = _run_dir(args, config)
    dataset = _dataset(args, config)
    model, stage = load_model(config, Path(args.checkpoint) if args.checkpoint else latest_checkpoint(run_dir),
                              _device(args.device))
    if variant != "forge-star" and stage == TrainingStage.RECONSTRUCTION.value:
        logger.warning(f"Variant {variant} uses predicted poses but the checkpoint is from stage 1")

    scenes = range(min(args.scenes, len(dataset))) if args.scenes is not None else None
    report = evaluate(model, dataset, config, variant, tto_iters=args.tto_iters, scenes=scenes)
    path = write_report(report, Path(args.out) if args.out else run_dir)
    print(report_table(report), end="")
    print(f"report {path}")
    return 0


# ============================================================
# render
# ============================================================

def orbit_extrinsics(n_views: int, distance: float, elevation_deg: float = 20.0) -> CameraPose:
    """
    Cameras on a circle around the volume center in the canonical grid frame,
    starting at the canonical camera and all looking at the center. Up is -y.
    """
    up = torch.tensor([0.0, -1.0, 0.0], dtype=torch.float64)
    elevation = math.radians(elevation_deg)
    poses = []
    for i in range(n_views):
        azimuth = 2.0 * math.pi * i / n_views
        center = torch.tensor([
            distance * math.cos(elevation) * math.sin(azimuth),
            -distance * math.sin(elevation),
            -distance * math.cos(elevation) * math.cos(azimuth),
        ], dtype=torch.float64)
        poses.append(look_at(center, up=up))
    return CameraPose(
        rotation=torch.stack([pose.rotation for pose in poses]),
        translation=torch.stack([pose.translation for pose in poses]),
    )


def _write_png(path: Path, rgb: torch.Tensor) -> None:
    pixels = (rgb.detach().clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(pixels).save(path)


def cmd_render(args: argparse.Namespace, config: RunConfig) -> int:
    run_dir = _run_dir(args, config)
    device = _device(args.device)
    model, stage = load_model(config, Path(args.checkpoint) if args.checkpoint else latest_checkpoint(run_dir), device)
    dataset = _dataset(args, config)
    if not 0 <= args.scene < len(dataset):
        raise ConfigError(f"Scene index {args.scene} is outside the dataset (0..{len(dataset) - 1})")
    episode = dataset[args.scene]
    out_dir = Path(args.out) if args.out else run_dir / "render" / episode.scene_id

    batch = collate([episode], device)
    with torch.no_grad():
        rel_poses = episode.gt_relative_poses(0) if args.poses == "gt" else None
        if rel_poses is not None:
            rel_poses = RelativePoseSet(rel_poses.rotations[None].float().to(device),
                                        rel_poses.translations[None].float().to(device), 0)
        reconstruction = model.infer(batch.rgb, batch.mask, 0, rel_poses)
        volume = reconstruction.volume.select(0)

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written: List[str] = []
        if args.orbit:
            extrinsics = orbit_extrinsics(args.orbit, config.volume.canonical_distance, args.elevation)
            canonical = model.canonical_pose(dtype=torch.float64).to(device=torch.device("cpu"))
            relative = compose(extrinsics, invert(canonical)).to(dtype=torch.float32, device=device)
            with torch.no_grad():
                rendered = model.render_views(volume, relative, episode.focal)
            for i in range(args.orbit):
                image_path = out_dir / f"orbit_{i:03d}.png"
                _write_png(image_path, rendered.rgb[i])
                rendered.depth[i].detach().cpu().numpy().astype(np.float32).tofile(out_dir / f"orbit_{i:03d}_depth.bin")
                written.append(image_path.name)
        if args.voxels:
            occupancy = extract_voxels(volume, args.threshold if args.threshold is not None else config.eval.voxel_threshold)
            voxel_path = write_occupancy(out_dir / "occupancy.fkvx", occupancy, config.volume.extent)
            written.append(voxel_path.name)
            print(f"occupied voxels {int(occupancy.sum())} of {occupancy.numel()}")
    except OSError as e:
        raise DatasetIOError(f"Error writing render outputs to {out_dir}: {e}") from e

    print(f"render {out_dir} ({len(written)} files, stage {stage} checkpoint, {args.poses} poses)")
    return 0


# ============================================================
# ablate
# ============================================================

@dataclass(frozen=True)
class AblationVariant:
    label: str
    overrides: Dict[str, Dict[str, object]] = field(default_factory=dict)


@dataclass(frozen=True)
class AblationSuite:
    stages: Tuple[TrainingStage, ...]
    variant: str
    metrics: Tuple[str, str]
    variants: Tuple[AblationVariant, ...]


RECONSTRUCTION_METRICS = ("psnr", "ssim")
POSE_METRICS = ("rot_mean_deg", "rot_median_deg")
POSE_STAGES = (TrainingStage.RECONSTRUCTION, TrainingStage.POSE)

SUITES: Dict[str, AblationSuite] = {
    "fusion": AblationSuite(
        stages=(TrainingStage.RECONSTRUCTION,), variant="forge-star", metrics=RECONSTRUCTION_METRICS,
        variants=(
            AblationVariant("avg", {"fusion": {"mode": "avg"}}),
            AblationVariant("seq", {"fusion": {"mode": "seq"}}),
            AblationVariant("both", {"fusion": {"mode": "both"}}),
        ),
    ),
    "pose": AblationSuite(
        stages=POSE_STAGES, variant="forge-dagger", metrics=POSE_METRICS,
        variants=(
            AblationVariant("global", {"pose": {"extractors": "global"}}),
            AblationVariant("pairwise", {"pose": {"extractors": "pairwise"}}),
            AblationVariant("global-pairwise", {"pose": {"extractors": "both"}}),
        ),
    ),
    "encoder": AblationSuite(
        stages=(TrainingStage.RECONSTRUCTION,), variant="forge-star", metrics=RECONSTRUCTION_METRICS,
        variants=(
            AblationVariant("unet", {"encoder": {"unet_refine": True}}),
            AblationVariant("no-ccl", {"loss": {"ccl_enabled": False}}),
            AblationVariant("default"),
        ),
    ),
    "design": AblationSuite(
        stages=POSE_STAGES, variant="forge-dagger", metrics=POSE_METRICS,
        variants=(
            AblationVariant("global-no-jr", {"pose": {"extractors": "global", "joint_reasoning": False}}),
            AblationVariant("pairwise-no-ccl", {"pose": {"extractors": "pairwise"}, "loss": {"ccl_enabled": False}}),
            AblationVariant("pairwise-implicit", {"pose": {"extractors": "pairwise"}, "pairwise": {"values": "features"}}),
        ),
    ),
    "correlation": AblationSuite(
        stages=POSE_STAGES, variant="forge-dagger", metrics=POSE_METRICS,
        variants=(
            AblationVariant("softmax", {"pose": {"extractors": "pairwise"}, "pairwise": {"normalize": "softmax"}}),
            AblationVariant("none", {"pose": {"extractors": "pairwise"}, "pairwise": {"normalize": "none"}}),
        ),
    ),
}


def _metric_row(label: str, report: EvalReport, metrics: Sequence[str]) -> Dict[str, object]:
    total = report.aggregate
    values: Dict[str, Optional[float]] = {
        "psnr": total.psnr if total else None,
        "ssim": total.ssim if total else None,
        "rot_mean_deg": total.rotation_error_deg if total else None,
        "rot_median_deg": total.rotation_error_median_deg if total else None,
    }
    return {"variant": label, **{metric: values[metric] for metric in metrics}}


def run_ablation(suite_name: str, config: RunConfig, dataset: SceneDataset, out_dir: Path,
                 device: torch.device) -> Tuple[str, List[Dict[str, object]]]:
    """Train and evaluate every variant of a suite from scratch; returns the table and its rows."""
    suite = SUITES.get(suite_name)
    if suite is None:
        raise ConfigError(f"Unknown ablation suite '{suite_name}'; expected one of {', '.join(SUITES)}")
    schedule = {"train": {
        "stage1_iterations": config.ablate.stage1_iterations,
        "stage2_iterations": config.ablate.stage2_iterations,
    }}

    rows: List[Dict[str, object]] = []
    for variant in suite.variants:
        overrides: Dict[str, Dict[str, object]] = {section: dict(fields) for section, fields in schedule.items()}
        for section, fields in variant.overrides.items():
            overrides.setdefault(section, {}).update(fields)
        variant_config = config.with_overrides(overrides)
        run_dir = out_dir / variant.label
        logger.info(f"ablate {suite_name} | {variant.label} | config {variant_config.config_hash()}")
        with log_duration(f"ablate {suite_name}/{variant.label}"):
            trainer = Trainer(variant_config, dataset, run_dir, device)
            for stage in suite.stages:
                trainer.train_stage(stage)
            report = evaluate(trainer.model, dataset, variant_config, suite.variant, tto_iters=0)
        write_report(report, run_dir)
        rows.append(_metric_row(variant.label, report, suite.metrics))

    table = f"suite {suite_name} | eval {suite.variant}\n" + format_table(rows, ("variant",) + suite.metrics)
    return table, rows


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    if args.suite not in SUITES:
        raise ConfigError(f"Unknown ablation suite '{args.suite}'; expected one of {', '.join(SUITES)}")
    out_dir = Path(args.out) if args.out else _run_dir(args, config) / "ablate" / args.suite
    table, rows = run_ablation(args.suite, config, _dataset(args, config), out_dir, _device(args.device))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"ablate-{args.suite}.txt").write_text(table)
        with open(out_dir / f"ablate-{args.suite}.json", "w") as fh:
            json.dump({"suite": args.suite, "config_hash": config.config_hash(), "rows": rows}, fh, indent=2)
    except OSError as e:
        raise DatasetIOError(f"Error writing ablation table to {out_dir}: {e}") from e
    print(table, end="")
    return 0


# ============================================================
# Parser and dispatch
# ============================================================

COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "ablate": cmd_ablate,
}


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="dataset directory (default: paths.dataset)")
    parser.add_argument("--run-dir", help="checkpoint and report directory (default: paths.run_dir)")
    parser.add_argument("--device", default="cpu", choices=("cpu", "cuda"))


def build_parser() -> argparse.ArgumentParser:
    parser = ForgeArgumentParser(prog="forgekit", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"forgekit {__version__}")
    parser.add_argument("--config", help="INI config file (default: the packaged toy config)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    parser.add_argument("--log-level", help="overrides logging.level")
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", help="generate a procedural multi-view dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--scenes", type=int)
    gen.add_argument("--views", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--workers", type=int)

    train = subparsers.add_parser("train", help="run training stages")
    train.add_argument("--stage", default="all", choices=STAGE_CHOICES)
    _add_run_arguments(train)

    evaluation = subparsers.add_parser("eval", help="evaluate a checkpoint")
    evaluation.add_argument("--variant", help=f"one of {', '.join(VARIANTS)} (default: eval.variant)")
    evaluation.add_argument("--tto-iters", type=int, help="test-time optimization steps (default: eval.tto_iters)")
    evaluation.add_argument("--checkpoint", help="checkpoint file (default: latest in the run directory)")
    evaluation.add_argument("--scenes", type=int, help="evaluate only the first N scenes")
    evaluation.add_argument("--out", help="report directory (default: the run directory)")
    _add_run_arguments(evaluation)

    render = subparsers.add_parser("render", help="render novel views and export occupancy")
    render.add_argument("--checkpoint")
    render.add_argument("--scene", type=int, default=0)
    render.add_argument("--poses", default="gt", choices=("gt", "predicted"))
    render.add_argument("--orbit", type=int, default=0, help="number of orbit views")
    render.add_argument("--elevation", type=float, default=20.0, help="orbit elevation in degrees")
    render.add_argument("--voxels", action="store_true", help="export the thresholded occupancy grid")
    render.add_argument("--threshold", type=float, help="density threshold (default: eval.voxel_threshold)")
    render.add_argument("--out")
    _add_run_arguments(render)

    ablate = subparsers.add_parser("ablate", help="train and compare a suite of variants")
    ablate.add_argument("--suite", required=True, help=f"one of {', '.join(SUITES)}")
    ablate.add_argument("--out")
    _add_run_arguments(ablate)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run one command and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
        config = RunConfig.from_config_file(args.config, args.overrides)
        configure_logging(args.log_level or config.logging.level, config.logging.log_file)
        print(f"config_hash {config.config_hash()}")
        logger.info(f"{args.command} | config {config.config_hash()} | model {config.model_hash()}")
        with log_duration(args.command):
            return COMMANDS[args.command](args, config)
    except ForgeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
