"""
Versioned checkpoint container: named weight blocks per module, optimizer
state, stage id and the hashes of the configuration that produced them.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import torch
import torch.nn as nn

from forgekit.core.config import RunConfig
from forgekit.core.errors import CheckpointError, DatasetIOError
from forgekit.core.logger import logger

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    config_hash: str
    model_hash: str
    blocks: Dict[str, Dict[str, torch.Tensor]]
    config: Dict[str, Any]
    iteration: int = 0
    optimizer: Optional[Dict[str, Any]] = None
    format_version: int = FORMAT_VERSION
    extra: Dict[str, Any] = field(default_factory=dict)


def checkpoint_path(run_dir: Path, stage: str) -> Path:
    return Path(run_dir) / f"stage{stage}.ckpt"


def save_checkpoint(path: Path, blocks: Dict[str, nn.Module], stage: str, config: RunConfig,
                    optimizer: Optional[torch.optim.Optimizer] = None, iteration: int = 0) -> Path:
    payload = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "config_hash": config.config_hash(),
        "model_hash": config.model_hash(),
        "config": config.model_dump(mode="json"),
        "iteration": iteration,
        "blocks": {name: module.state_dict() for name, module in blocks.items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        staging = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, staging)
        staging.replace(path)
    except OSError as e:
        raise DatasetIOError(f"Error writing checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} (stage {stage}, iteration {iteration})")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format {version} in {path}")
    return Checkpoint(
        stage=str(payload["stage"]),
        config_hash=payload["config_hash"],
        model_hash=payload["model_hash"],
        blocks=payload["blocks"],
        config=payload["config"],
        iteration=int(payload.get("iteration", 0)),
        optimizer=payload.get("optimizer"),
    )


def restore_blocks(checkpoint: Checkpoint, blocks: Dict[str, nn.Module], config: RunConfig,
                   names: Optional[Iterable[str]] = None) -> None:
    """
    Load weight blocks into modules. The architecture hash must match;
    differences elsewhere in the configuration (paths, schedules) are allowed.
    """
    if checkpoint.model_hash != config.model_hash():
        raise CheckpointError(
            f"Checkpoint was trained with a different model configuration "
            f"(model hash {checkpoint.model_hash}, current {config.model_hash()})"
        )
    for name in names or blocks.keys():
        if name not in checkpoint.blocks:
            raise CheckpointError(f"Checkpoint has no '{name}' block")
        try:
            blocks[name].load_state_dict(checkpoint.blocks[name])
        except RuntimeError as e:
            raise CheckpointError(f"Cannot load block '{name}': {e}") from e
