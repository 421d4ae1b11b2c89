"""
Relative camera pose estimation.

Two extractors produce one feature row per query view: a global one that
relates every query view's 2D tokens to the canonical view's with attention,
and a pairwise one that correlates voxel grids against a 3D positional
embedding. A regressor maps the concatenated rows to quaternion + translation.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
from torch import Tensor

from forgekit.core.config import RunConfig
from forgekit.core.errors import PreconditionError, ShapeError
from forgekit.geometry import (
    CameraPose,
    compose,
    invert,
    make_positional_embedding,
    normalize_quaternion,
    relative_pose,
)


# ============================================================
# Pose records
# ============================================================

@dataclass(frozen=True)
class RelativePoseSet:
    """
    Relative poses ΔΦ of the query views against ``canonical_index``.

    Row j is the j-th view in input order with the canonical view skipped.
    Tensors may carry a leading batch axis: rotations (..., k-1, 4),
    translations (..., k-1, 3).
    """

    rotations: Tensor
    translations: Tensor
    canonical_index: int = 0

    def __len__(self) -> int:
        return self.rotations.shape[-2]

    @property
    def n_views(self) -> int:
        return len(self) + 1

    @property
    def query_indices(self) -> List[int]:
        return [index for index in range(self.n_views) if index != self.canonical_index]

    @property
    def transforms(self) -> CameraPose:
        return CameraPose(rotation=self.rotations, translation=self.translations)

    @property
    def poses(self) -> List[CameraPose]:
        return [
            CameraPose(rotation=self.rotations[..., j, :], translation=self.translations[..., j, :])
            for j in range(len(self))
        ]

    @classmethod
    def from_absolute(cls, extrinsics: CameraPose, canonical_index: int = 0) -> "RelativePoseSet":
        """Ground truth from stacked world-to-camera poses (..., k, ·)."""
        n_views = extrinsics.rotation.shape[-2]
        canonical = CameraPose(
            rotation=extrinsics.rotation[..., canonical_index:canonical_index + 1, :],
            translation=extrinsics.translation[..., canonical_index:canonical_index + 1, :],
        )
        relative = relative_pose(canonical, extrinsics)
        keep = [index for index in range(n_views) if index != canonical_index]
        return cls(
            rotations=relative.rotation[..., keep, :],
            translations=relative.translation[..., keep, :],
            canonical_index=canonical_index,
        )

    def all_views(self) -> CameraPose:
        """Poses of every view (..., k, ·), with the identity at the canonical slot."""
        identity = CameraPose.identity(dtype=self.rotations.dtype, device=self.rotations.device)
        shape = self.rotations.shape[:-2]
        rotations = list(self.rotations.unbind(-2))
        translations = list(self.translations.unbind(-2))
        rotations.insert(self.canonical_index, identity.rotation.expand(*shape, 4))
        translations.insert(self.canonical_index, identity.translation.expand(*shape, 3))
        return CameraPose(rotation=torch.stack(rotations, dim=-2), translation=torch.stack(translations, dim=-2))

    def rebase(self, canonical_index: int) -> "RelativePoseSet":
        """Express the same cameras against another canonical view: ΔΦ_b^j = ΔΦ_a^j · (ΔΦ_a^b)⁻¹."""
        if canonical_index == self.canonical_index:
            return self
        every = self.all_views()
        anchor = CameraPose(
            rotation=every.rotation[..., canonical_index:canonical_index + 1, :],
            translation=every.translation[..., canonical_index:canonical_index + 1, :],
        )
        rebased = compose(every, invert(anchor))
        keep = [index for index in range(self.n_views) if index != canonical_index]
        return RelativePoseSet(
            rotations=rebased.rotation[..., keep, :],
            translations=rebased.translation[..., keep, :],
            canonical_index=canonical_index,
        )

    def select(self, index: int) -> "RelativePoseSet":
        return RelativePoseSet(self.rotations[index], self.translations[index], self.canonical_index)

    def detach(self) -> "RelativePoseSet":
        return RelativePoseSet(self.rotations.detach(), self.translations.detach(), self.canonical_index)

    def to_list(self) -> List[List[float]]:
        vectors = torch.cat((self.rotations, self.translations), dim=-1).detach().cpu()
        return vectors.reshape(-1, 7).tolist()


@dataclass(frozen=True)
class PoseFeatures:
    """Per-query feature rows (..., k-1, feature_dim); inactive extractors give zeros."""

    global_features: Tensor
    pairwise_features: Tensor

    def concatenated(self) -> Tensor:
        return torch.cat((self.global_features, self.pairwise_features), dim=-1)


# ============================================================
# Shared layers
# ============================================================

def _collapse_stack(in_channels: int, out_channels: int, side: int, conv: type) -> nn.Sequential:
    """Stride-2 convolutions that bring a ``side``-wide map down to 1."""
    depth = int(math.log2(side))
    if 2 ** depth != side:
        raise ShapeError(f"Token map side must be a power of two, got {side}")
    layers: list[nn.Module] = []
    channels = in_channels
    for level in range(depth):
        next_channels = out_channels if level == depth - 1 else max(channels, out_channels // 2 ** (depth - level - 1))
        layers += [conv(channels, next_channels, kernel_size=3, stride=2, padding=1), nn.ReLU(inplace=True)]
        channels = next_channels
    if not layers:
        layers.append(conv(channels, out_channels, kernel_size=1))
    else:
        layers.pop()  # no activation on the output features
    return nn.Sequential(*layers)


class AttentionBlock(nn.Module):
    """Post-norm attention + feed-forward block."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.attention = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(channels)
        self.feed_forward = nn.Sequential(
            nn.Linear(channels, channels * 2),
            nn.ReLU(inplace=True),
            nn.Linear(channels * 2, channels),
        )
        self.norm2 = nn.LayerNorm(channels)

    def forward(self, query: Tensor, context: Optional[Tensor] = None) -> Tensor:
        context = query if context is None else context
        attended, _ = self.attention(query, context, context, need_weights=False)
        query = self.norm1(query + attended)
        return self.norm2(query + self.feed_forward(query))


class ReasoningBlock(nn.Module):
    """
    Cross-attention from query tokens to canonical tokens, then self-attention
    jointly over all query tokens. Without joint reasoning the second step is
    another cross-attention, so query views never see each other.
    """

    def __init__(self, channels: int, heads: int, joint_reasoning: bool = True):
        super().__init__()
        self.joint_reasoning = joint_reasoning
        self.cross = AttentionBlock(channels, heads)
        self.second = AttentionBlock(channels, heads)

    def forward(self, queries: Tensor, canonical: Tensor) -> Tensor:
        queries = self.cross(queries, canonical)
        if self.joint_reasoning:
            return self.second(queries)
        return self.second(queries, canonical)


# ============================================================
# Global extractor
# ============================================================

class GlobalPoseExtractor(nn.Module):
    def __init__(self, image_size: int, token_stride: int, token_channels: int, heads: int,
                 blocks: int, feature_dim: int, joint_reasoning: bool = True):
        super().__init__()
        self.side = image_size // token_stride
        self.token_channels = token_channels
        layers: list[nn.Module] = []
        channels = 4
        for _ in range(int(math.log2(token_stride))):
            layers += [nn.Conv2d(channels, token_channels, kernel_size=3, stride=2, padding=1), nn.ReLU(inplace=True)]
            channels = token_channels
        layers.append(nn.Conv2d(channels, token_channels, kernel_size=1))
        self.tokenizer = nn.Sequential(*layers)
        self.position = nn.Parameter(torch.randn(1, self.side * self.side, token_channels) * 0.02)
        self.blocks = nn.ModuleList(ReasoningBlock(token_channels, heads, joint_reasoning) for _ in range(blocks))
        self.collapse = _collapse_stack(token_channels, feature_dim, self.side, nn.Conv2d)

    def tokens(self, rgb: Tensor, mask: Tensor) -> Tensor:
        """(N, 3, H, W), (N, 1, H, W) -> (N, side², channels) with the shared embedding added."""
        maps = self.tokenizer(torch.cat((rgb * mask, mask), dim=1))
        return maps.flatten(2).transpose(1, 2) + self.position

    def forward(self, rgb: Tensor, mask: Tensor, canonical_index: int) -> Tensor:
        """(B, k, 3, H, W), (B, k, 1, H, W) -> (B, k-1, feature_dim)."""
        batch, n_views = rgb.shape[:2]
        if n_views < 2:
            raise PreconditionError(f"Pose estimation needs at least 2 views, got {n_views}")
        tokens = self.tokens(rgb.flatten(0, 1), mask.flatten(0, 1))
        tokens = tokens.reshape(batch, n_views, -1, self.token_channels)

        canonical = tokens[:, canonical_index]
        keep = [index for index in range(n_views) if index != canonical_index]
        queries = tokens[:, keep].reshape(batch, -1, self.token_channels)
        for block in self.blocks:
            queries = block(queries, canonical)

        per_view = queries.reshape(batch * (n_views - 1), self.side, self.side, self.token_channels)
        pooled = self.collapse(per_view.permute(0, 3, 1, 2))
        return pooled.reshape(batch, n_views - 1, -1)


# ============================================================
# Pairwise extractor
# ============================================================

def cross_view_correlation(query: Tensor, canonical: Tensor, values: Tensor, normalize: str = "softmax") -> Tensor:
    """
    Corr = A · values with S = query · canonicalᵀ and A = softmax(S/√C) or S.

    query, canonical: (B, N, C); values: (B, N, V) or (N, V).
    """
    similarity = query @ canonical.transpose(-1, -2)
    if normalize == "softmax":
        weights = torch.softmax(similarity / math.sqrt(query.shape[-1]), dim=-1)
    elif normalize == "none":
        weights = similarity
    else:
        raise ValueError(f"Unknown correlation normalization: {normalize}")
    return weights @ values


class PairwisePoseExtractor(nn.Module):
    def __init__(self, voxel_channels: int, grid_size: int, channels: int, pe_channels: int, heads: int,
                 feature_dim: int, normalize: str = "softmax", values: str = "pe"):
        super().__init__()
        self.side = grid_size // 2
        self.normalize = normalize
        self.values = values
        self.downsample = nn.Sequential(
            nn.Conv3d(voxel_channels, channels, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(channels, channels, kernel_size=3, padding=1),
        )
        embedding = make_positional_embedding(self.side, self.side, self.side, pe_channels)
        self.register_buffer("embedding", embedding.flat, persistent=False)
        self.value_projection = nn.Linear(channels, pe_channels) if values == "features" else None
        self.refine = AttentionBlock(pe_channels, heads)
        self.reduce = _collapse_stack(pe_channels, feature_dim, self.side, nn.Conv3d)

    def correlate(self, z_query: Tensor, z_canonical: Tensor) -> Tensor:
        """(B, c, g, g, g) pair -> correlation tokens (B, (g/2)³, pe_channels)."""
        if z_query.shape != z_canonical.shape:
            raise ShapeError(f"Pairwise grids differ: {tuple(z_query.shape)} vs {tuple(z_canonical.shape)}")
        query = self.downsample(z_query).flatten(2).transpose(1, 2)
        canonical = self.downsample(z_canonical).flatten(2).transpose(1, 2)
        if self.value_projection is None:
            values = self.embedding.to(query.dtype)
        else:
            values = self.value_projection(canonical)
        return cross_view_correlation(query, canonical, values, self.normalize)

    def forward(self, z_query: Tensor, z_canonical: Tensor) -> Tensor:
        """(B, c, g, g, g) pair -> (B, feature_dim)."""
        tokens = self.refine(self.correlate(z_query, z_canonical))
        batch = tokens.shape[0]
        volume = tokens.transpose(1, 2).reshape(batch, -1, self.side, self.side, self.side)
        return self.reduce(volume).reshape(batch, -1)


# ============================================================
# Regression and the assembled estimator
# ============================================================

class PoseRegressor(nn.Module):
    def __init__(self, feature_dim: int, hidden_dim: int, dropout: float = 0.6):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.mlp = nn.Sequential(
            nn.Linear(2 * feature_dim, hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, 7),
        )
        with torch.no_grad():
            self.mlp[-1].bias.zero_()
            self.mlp[-1].bias[0] = 1.0

    def forward(self, features: Tensor) -> Tensor:
        return self.mlp(self.dropout(features))


def regress_poses(regressor: PoseRegressor, features: PoseFeatures, canonical_index: int = 0) -> RelativePoseSet:
    if features.global_features.shape[:-1] != features.pairwise_features.shape[:-1]:
        raise ShapeError("Global and pairwise feature rows do not match")
    raw = regressor(features.concatenated())
    return RelativePoseSet(
        rotations=normalize_quaternion(raw[..., :4]),
        translations=raw[..., 4:],
        canonical_index=canonical_index,
    )


class PoseEstimator(nn.Module):
    EXTRACTORS = ("global", "pairwise", "both")

    def __init__(self, global_extractor: GlobalPoseExtractor, pairwise_extractor: PairwisePoseExtractor,
                 regressor: PoseRegressor, feature_dim: int, extractors: str = "both"):
        super().__init__()
        self.global_extractor = global_extractor
        self.pairwise_extractor = pairwise_extractor
        self.regressor = regressor
        self.feature_dim = feature_dim
        self.extractors = extractors

    @classmethod
    def from_config(cls, config: RunConfig) -> "PoseEstimator":
        pose, pairwise = config.pose, config.pairwise
        return cls(
            global_extractor=GlobalPoseExtractor(
                image_size=config.model.image_size,
                token_stride=pose.token_stride,
                token_channels=pose.token_channels,
                heads=pose.heads,
                blocks=pose.gpr_blocks,
                feature_dim=pose.feature_dim,
                joint_reasoning=pose.joint_reasoning,
            ),
            pairwise_extractor=PairwisePoseExtractor(
                voxel_channels=config.encoder.voxel_channels,
                grid_size=config.grid_size,
                channels=pairwise.channels,
                pe_channels=pairwise.pe_channels,
                heads=pairwise.heads,
                feature_dim=pose.feature_dim,
                normalize=pairwise.normalize,
                values=pairwise.values,
            ),
            regressor=PoseRegressor(pose.feature_dim, pose.hidden_dim, pose.dropout),
            feature_dim=pose.feature_dim,
            extractors=pose.extractors,
        )

    @property
    def extractors(self) -> str:
        return self._extractors

    @extractors.setter
    def extractors(self, value: str) -> None:
        if value not in self.EXTRACTORS:
            raise ValueError(f"Unknown extractor selection: {value}")
        self._extractors = value

    def global_features(self, rgb: Tensor, mask: Tensor, canonical_index: int) -> Tensor:
        return self.global_extractor(rgb, mask, canonical_index)

    def pairwise_features(self, grids: Tensor, canonical_index: int) -> Tensor:
        """(B, k, c, g, g, g) -> (B, k-1, feature_dim), one shared module per pair."""
        batch, n_views = grids.shape[:2]
        keep = [index for index in range(n_views) if index != canonical_index]
        queries = grids[:, keep].flatten(0, 1)
        canonical = grids[:, canonical_index:canonical_index + 1].expand(-1, len(keep), *grids.shape[2:]).flatten(0, 1)
        return self.pairwise_extractor(queries, canonical).reshape(batch, len(keep), -1)

    def features(self, rgb: Tensor, mask: Tensor, grids: Tensor, canonical_index: int) -> PoseFeatures:
        batch, n_views = rgb.shape[:2]
        zeros = rgb.new_zeros(batch, n_views - 1, self.feature_dim)
        use_global = self.extractors in ("global", "both")
        use_pairwise = self.extractors in ("pairwise", "both")
        return PoseFeatures(
            global_features=self.global_features(rgb, mask, canonical_index) if use_global else zeros,
            pairwise_features=self.pairwise_features(grids, canonical_index) if use_pairwise else zeros,
        )

    def forward(self, rgb: Tensor, mask: Tensor, grids: Tensor, canonical_index: int = 0) -> RelativePoseSet:
        if rgb.shape[1] < 2:
            raise PreconditionError(f"Pose estimation needs at least 2 views, got {rgb.shape[1]}")
        return regress_poses(self.regressor, self.features(rgb, mask, grids, canonical_index), canonical_index)


def estimate(estimator: PoseEstimator, rgb: Tensor, mask: Tensor, grids: Tensor,
             canonical_index: int = 0) -> RelativePoseSet:
    return estimator(rgb, mask, grids, canonical_index)


def stack_pose_sets(sets: Sequence[RelativePoseSet]) -> RelativePoseSet:
    canonical = {item.canonical_index for item in sets}
    if len(canonical) != 1:
        raise PreconditionError("Pose sets with different canonical views cannot be stacked")
    return RelativePoseSet(
        rotations=torch.stack([item.rotations for item in sets]),
        translations=torch.stack([item.translations for item in sets]),
        canonical_index=canonical.pop(),
    )
