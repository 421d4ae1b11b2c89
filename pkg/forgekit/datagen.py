"""
Procedural multi-view dataset generator.

Scenes are small sets of analytic primitives around the origin; cameras sit
on a distance shell looking at the origin. The oracle renderer intersects
rays with the primitives exactly, so images, masks, depth and occupancy all
come with closed-form ground truth.
"""
import json
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from forgekit.core.config import DatagenSettings
from forgekit.core.errors import DatasetIOError, GeometryError
from forgekit.core.logger import logger
from forgekit.geometry import Camera, CameraPose, look_at, relative_pose, voxel_centers
from forgekit.pose import RelativePoseSet
from forgekit.volume import generate_rays

FORMAT_VERSION = 1
LIGHT_DIRECTION = np.array([0.4, -0.6, 0.7]) / np.linalg.norm([0.4, -0.6, 0.7])
AMBIENT = 0.3

Vec3 = Tuple[float, float, float]


# ============================================================
# Scene description
# ============================================================

class Primitive(BaseModel):
    """
    One solid. Spheres use ``radius``; boxes are axis-aligned with
    ``half_extents``; capsules are the points within ``radius`` of the
    segment ``center ± half_length · axis``.
    """

    kind: Literal["sphere", "box", "capsule"]
    center: Vec3
    albedo: Vec3 = (0.8, 0.8, 0.8)
    radius: float = Field(default=0.0, ge=0.0)
    half_extents: Vec3 = (0.0, 0.0, 0.0)
    axis: Vec3 = (0.0, 0.0, 1.0)
    half_length: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_size(self) -> "Primitive":
        if self.kind in ("sphere", "capsule") and self.radius <= 0:
            raise ValueError(f"{self.kind} needs a positive radius")
        if self.kind == "box" and min(self.half_extents) <= 0:
            raise ValueError("box needs positive half extents")
        if self.kind == "capsule" and abs(np.linalg.norm(self.axis) - 1.0) > 1e-6:
            raise ValueError("capsule axis must be a unit vector")
        return self

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        center = np.asarray(self.center)
        if self.kind == "sphere":
            reach = np.full(3, self.radius)
        elif self.kind == "box":
            reach = np.asarray(self.half_extents)
        else:
            reach = np.abs(np.asarray(self.axis)) * self.half_length + self.radius
        return center - reach, center + reach

    def bounding_radius(self) -> float:
        """Distance from the origin to the farthest point of the primitive."""
        center = np.linalg.norm(self.center)
        if self.kind == "sphere":
            return float(center + self.radius)
        if self.kind == "box":
            return float(center + np.linalg.norm(self.half_extents))
        return float(center + self.half_length + self.radius)


class SceneSpec(BaseModel):
    primitives: List[Primitive] = []

    @model_validator(mode="after")
    def _check_fits(self) -> "SceneSpec":
        if self.primitives:
            low, high = self.bounds()
            if float((high - low).max()) > 1.0 + 1e-9:
                raise ValueError("scene bounding box exceeds 1 m per side")
        return self

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lows, highs = zip(*(primitive.bounds() for primitive in self.primitives))
        return np.min(lows, axis=0), np.max(highs, axis=0)


def random_scene(rng: np.random.Generator, max_primitives: int = 4, fit_radius: float = 0.45) -> SceneSpec:
    """1 to ``max_primitives`` primitives, rejection-sampled to lie within ``fit_radius`` of the origin."""
    count = int(rng.integers(1, max_primitives + 1))
    primitives: List[Primitive] = []
    while len(primitives) < count:
        kind = ("sphere", "box", "capsule")[int(rng.integers(0, 3))]
        center = tuple(float(v) for v in rng.uniform(-0.25, 0.25, size=3))
        albedo = tuple(float(v) for v in rng.uniform(0.2, 1.0, size=3))
        if kind == "sphere":
            primitive = Primitive(kind=kind, center=center, albedo=albedo, radius=float(rng.uniform(0.08, 0.25)))
        elif kind == "box":
            half = tuple(float(v) for v in rng.uniform(0.05, 0.2, size=3))
            primitive = Primitive(kind=kind, center=center, albedo=albedo, half_extents=half)
        else:
            axis = rng.normal(size=3)
            axis = tuple(float(v) for v in axis / np.linalg.norm(axis))
            primitive = Primitive(kind=kind, center=center, albedo=albedo, axis=axis,
                                  radius=float(rng.uniform(0.05, 0.12)), half_length=float(rng.uniform(0.05, 0.2)))
        if primitive.bounding_radius() <= fit_radius:
            primitives.append(primitive)
    return SceneSpec(primitives=primitives)


# ============================================================
# Cameras
# ============================================================

def sample_cameras(k: int, rng: np.random.Generator, resolution: int = 32, focal_factor: float = 1.25,
                   min_distance: float = 1.4, max_distance: float = 1.6) -> List[Camera]:
    """
    ``k`` look-at cameras: uniform viewing direction, distance uniform in
    [min_distance, max_distance], uniform in-plane roll.
    """
    cameras = []
    for _ in range(k):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        distance = rng.uniform(min_distance, max_distance)
        roll = rng.uniform(0.0, 2 * math.pi)
        center = torch.tensor(direction * distance, dtype=torch.float64)
        pose = look_at(center, roll=float(roll))
        cameras.append(Camera.centered(pose, focal_factor * resolution, resolution))
    return cameras


# ============================================================
# Oracle renderer
# ============================================================

def _intersect_sphere(origins: np.ndarray, directions: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    offset = origins - center
    b = np.einsum("ij,ij->i", offset, directions)
    c = np.einsum("ij,ij->i", offset, offset) - radius ** 2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    near, far = -b - root, -b + root
    t = np.where(near > 0, near, far)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _intersect_box(origins: np.ndarray, directions: np.ndarray, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(np.abs(directions) < 1e-12, 1e-12, directions)
        t0 = (center - half - origins) / safe
        t1 = (center + half - origins) / safe
    near = np.minimum(t0, t1).max(axis=1)
    far = np.maximum(t0, t1).min(axis=1)
    t = np.where(near > 0, near, far)
    return np.where((far >= near) & (t > 0), t, np.inf)


def _intersect_capsule(origins: np.ndarray, directions: np.ndarray, primitive: Primitive) -> np.ndarray:
    axis = np.asarray(primitive.axis)
    center = np.asarray(primitive.center)
    start = center - axis * primitive.half_length
    length = 2 * primitive.half_length
    radius = primitive.radius

    offset = origins - start
    d_par = directions @ axis
    o_par = offset @ axis
    d_perp = directions - d_par[:, None] * axis
    o_perp = offset - o_par[:, None] * axis
    a = np.einsum("ij,ij->i", d_perp, d_perp)
    b = np.einsum("ij,ij->i", d_perp, o_perp)
    c = np.einsum("ij,ij->i", o_perp, o_perp) - radius ** 2
    disc = b * b - a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / a
    along = o_par + t_side * d_par
    side_ok = (disc >= 0) & (a > 1e-12) & (t_side > 0) & (along >= 0) & (along <= length)
    t_side = np.where(side_ok, t_side, np.inf)

    caps = np.minimum(
        _intersect_sphere(origins, directions, start, radius),
        _intersect_sphere(origins, directions, start + axis * length, radius),
    )
    return np.minimum(t_side, caps)


def _normals(points: np.ndarray, primitive: Primitive) -> np.ndarray:
    center = np.asarray(primitive.center)
    if primitive.kind == "sphere":
        normal = points - center
    elif primitive.kind == "box":
        scaled = (points - center) / np.asarray(primitive.half_extents)
        face = np.argmax(np.abs(scaled), axis=1)
        normal = np.zeros_like(points)
        normal[np.arange(len(points)), face] = np.sign(scaled[np.arange(len(points)), face])
    else:
        axis = np.asarray(primitive.axis)
        along = np.clip((points - center) @ axis, -primitive.half_length, primitive.half_length)
        normal = points - (center + along[:, None] * axis)
    return normal / np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)


def intersect(primitive: Primitive, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Nearest positive hit distance per ray, ``inf`` on a miss."""
    if primitive.kind == "sphere":
        return _intersect_sphere(origins, directions, np.asarray(primitive.center), primitive.radius)
    if primitive.kind == "box":
        return _intersect_box(origins, directions, np.asarray(primitive.center), np.asarray(primitive.half_extents))
    return _intersect_capsule(origins, directions, primitive)


def oracle_render(scene: SceneSpec, camera: Camera, supersample: int = 1) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact render of ``scene``: rgb (H, W, 3) Lambert-shaded albedo on black,
    mask (H, W) hit coverage and depth (H, W) nearest hit distance along the
    ray (0 on background). With supersampling, rgb and mask are box-filtered
    and depth is averaged over covered subsamples.
    """
    height, width = camera.resolution
    fine = camera.scaled((height * supersample, width * supersample))
    origins_t, directions_t = generate_rays(fine)
    origins = origins_t.detach().cpu().numpy().astype(np.float64)
    directions = directions_t.detach().cpu().numpy().astype(np.float64)
    n_rays = len(origins)

    depth = np.full(n_rays, np.inf)
    owner = np.full(n_rays, -1)
    for index, primitive in enumerate(scene.primitives):
        t = intersect(primitive, origins, directions)
        closer = t < depth
        depth = np.where(closer, t, depth)
        owner = np.where(closer, index, owner)

    hit = np.isfinite(depth)
    rgb = np.zeros((n_rays, 3))
    for index, primitive in enumerate(scene.primitives):
        rows = np.flatnonzero(owner == index)
        if rows.size == 0:
            continue
        points = origins[rows] + depth[rows, None] * directions[rows]
        shade = AMBIENT + (1 - AMBIENT) * np.clip(_normals(points, primitive) @ LIGHT_DIRECTION, 0.0, None)
        rgb[rows] = np.asarray(primitive.albedo) * shade[:, None]
    depth = np.where(hit, depth, 0.0)

    def _pool(values: np.ndarray) -> np.ndarray:
        shaped = values.reshape(height, supersample, width, supersample, -1)
        return shaped.mean(axis=(1, 3))

    mask = _pool(hit.astype(np.float64)[:, None])[..., 0]
    depth_sum = _pool((depth * hit)[:, None])[..., 0]
    depth = np.where(mask > 0, depth_sum / np.maximum(mask, 1e-12), 0.0)
    return np.clip(_pool(rgb), 0.0, 1.0), mask, depth


# ============================================================
# Occupancy
# ============================================================

def contains(primitive: Primitive, points: np.ndarray) -> np.ndarray:
    center = np.asarray(primitive.center)
    if primitive.kind == "sphere":
        return np.linalg.norm(points - center, axis=-1) <= primitive.radius
    if primitive.kind == "box":
        return np.all(np.abs(points - center) <= np.asarray(primitive.half_extents), axis=-1)
    axis = np.asarray(primitive.axis)
    along = np.clip((points - center) @ axis, -primitive.half_length, primitive.half_length)
    nearest = center + along[..., None] * axis
    return np.linalg.norm(points - nearest, axis=-1) <= primitive.radius


def voxelize(scene: SceneSpec, resolution: int, extent: float = 1.0,
             frame: Optional[CameraPose] = None) -> np.ndarray:
    """
    Occupancy (D, D, D), indexed (z, y, x), by point-in-primitive tests at
    voxel centers. ``frame`` maps grid points to world points; the default is
    a grid centered at the world origin.
    """
    if resolution < 2:
        raise GeometryError(f"Voxel resolution must be at least 2, got {resolution}")
    centers = voxel_centers((resolution,) * 3, extent, dtype=torch.float64)
    if frame is not None:
        centers = frame.to(dtype=torch.float64).apply(centers)
    points = centers.detach().cpu().numpy()
    occupancy = np.zeros((resolution,) * 3, dtype=bool)
    for primitive in scene.primitives:
        occupancy |= contains(primitive, points)
    return occupancy


# ============================================================
# Episodes and the on-disk dataset
# ============================================================

@dataclass(frozen=True)
class Episode:
    """One scene: k input views followed by k evaluation views."""

    scene_id: str
    scene: SceneSpec
    rgb: torch.Tensor  # (2k, 3, H, W)
    mask: torch.Tensor  # (2k, 1, H, W)
    depth: torch.Tensor  # (2k, 1, H, W)
    extrinsics: CameraPose  # (2k, ·) world-to-camera
    focal: float
    input_indices: List[int]
    eval_indices: List[int]

    @property
    def resolution(self) -> int:
        return self.rgb.shape[-1]

    def cameras(self) -> List[Camera]:
        return [
            Camera.centered(CameraPose(rotation=r, translation=t), self.focal, self.resolution)
            for r, t in zip(self.extrinsics.rotation.unbind(0), self.extrinsics.translation.unbind(0))
        ]

    def view_extrinsics(self, indices: Sequence[int]) -> CameraPose:
        return CameraPose(rotation=self.extrinsics.rotation[list(indices)],
                          translation=self.extrinsics.translation[list(indices)])

    def gt_relative_poses(self, canonical_index: int = 0) -> RelativePoseSet:
        """Relative poses among the input views against input view ``canonical_index``."""
        return RelativePoseSet.from_absolute(self.view_extrinsics(self.input_indices), canonical_index)

    def relative_to(self, canonical_index: int, indices: Sequence[int]) -> CameraPose:
        """ΔΦ of arbitrary views (e.g. evaluation views) against an input view."""
        canonical = self.view_extrinsics([self.input_indices[canonical_index]])
        targets = self.view_extrinsics(indices)
        return relative_pose(canonical, targets)


def _write_scene(out_dir: Path, scene_id: str, seed_sequence: np.random.SeedSequence, views: int,
                 settings: DatagenSettings) -> str:
    rng = np.random.default_rng(seed_sequence)
    scene = random_scene(rng, settings.max_primitives, settings.fit_radius)
    cameras = sample_cameras(2 * views, rng, settings.resolution, settings.focal_factor,
                             settings.min_distance, settings.max_distance)

    final = out_dir / scene_id
    staging = out_dir / f".{scene_id}.tmp"
    try:
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir(parents=True)
        for n, camera in enumerate(cameras):
            rgb, mask, depth = oracle_render(scene, camera, settings.supersample)
            Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(staging / f"view_{n}.png")
            Image.fromarray(np.round(mask * 255).astype(np.uint8)).save(staging / f"mask_{n}.png")
            depth.astype("<f4").tofile(staging / f"depth_{n}.bin")

        meta = {
            "scene_id": scene_id,
            "resolution": settings.resolution,
            "focal": settings.focal_factor * settings.resolution,
            "principal_point": [settings.resolution / 2, settings.resolution / 2],
            "cameras": [
                {"pose": camera.pose.to_list(), "focal": camera.focal, "resolution": list(camera.resolution)}
                for camera in cameras
            ],
            "scene": scene.model_dump(mode="json"),
            "splits": {"input": list(range(views)), "eval": list(range(views, 2 * views))},
        }
        with open(staging / "meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

        if final.exists():
            shutil.rmtree(final)
        staging.rename(final)
    except OSError as e:
        raise DatasetIOError(f"Error writing scene {scene_id} to {out_dir}: {e}") from e
    return scene_id


def make_dataset(n_scenes: int, k: int, seed: int, out_dir: Path,
                 settings: Optional[DatagenSettings] = None) -> Path:
    """
    Generate ``n_scenes`` episodes with ``2k`` views each under ``out_dir``
    and write ``manifest.json``. Output is a pure function of the arguments.
    """
    settings = settings or DatagenSettings()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"Cannot create dataset directory {out_dir}: {e}") from e

    scene_ids = [f"scene_{index:04d}" for index in range(n_scenes)]
    children = np.random.SeedSequence(seed).spawn(n_scenes)
    jobs = list(zip(scene_ids, children))

    if settings.workers > 1 and n_scenes > 1:
        with ProcessPoolExecutor(max_workers=settings.workers) as pool:
            futures = [pool.submit(_write_scene, out_dir, scene_id, child, k, settings) for scene_id, child in jobs]
            for future in tqdm(futures, desc="gen-data", unit="scene"):
                future.result()
    else:
        for scene_id, child in tqdm(jobs, desc="gen-data", unit="scene"):
            _write_scene(out_dir, scene_id, child, k, settings)

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "count": n_scenes,
        "views": k,
        "resolution": settings.resolution,
        "scenes": scene_ids,
    }
    manifest_path = out_dir / "manifest.json"
    try:
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    except OSError as e:
        raise DatasetIOError(f"Error writing manifest {manifest_path}: {e}") from e
    logger.info(f"Generated {n_scenes} scenes x {2 * k} views under {out_dir}")
    return manifest_path


class SceneDataset:
    """Read-only view of a generated dataset; episodes are cached after first load."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        try:
            with open(manifest_path) as fh:
                self.manifest = json.load(fh)
        except FileNotFoundError as e:
            raise DatasetIOError(f"No dataset manifest at {manifest_path}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetIOError(f"Cannot read dataset manifest {manifest_path}: {e}") from e
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetIOError(f"Unsupported dataset format {self.manifest.get('format_version')}")
        self.scene_ids: List[str] = list(self.manifest["scenes"])
        self._cache: Dict[str, Episode] = {}

    def __len__(self) -> int:
        return len(self.scene_ids)

    @property
    def views(self) -> int:
        return int(self.manifest["views"])

    @property
    def dataset_id(self) -> str:
        return f"{self.root.name}-seed{self.manifest['seed']}"

    def __getitem__(self, index: int) -> Episode:
        scene_id = self.scene_ids[index]
        if scene_id not in self._cache:
            self._cache[scene_id] = self._load(scene_id)
        return self._cache[scene_id]

    def _load(self, scene_id: str) -> Episode:
        folder = self.root / scene_id
        try:
            with open(folder / "meta.json") as fh:
                meta = json.load(fh)
            resolution = int(meta["resolution"])
            rgbs, masks, depths = [], [], []
            for n in range(len(meta["cameras"])):
                rgbs.append(np.asarray(Image.open(folder / f"view_{n}.png").convert("RGB"), dtype=np.float32) / 255.0)
                masks.append(np.asarray(Image.open(folder / f"mask_{n}.png").convert("L"), dtype=np.float32) / 255.0)
                depths.append(np.fromfile(folder / f"depth_{n}.bin", dtype="<f4").reshape(resolution, resolution))
        except (OSError, KeyError, ValueError) as e:
            raise DatasetIOError(f"Cannot load scene {scene_id} from {self.root}: {e}") from e

        poses = torch.tensor([camera["pose"] for camera in meta["cameras"]], dtype=torch.float64)
        return Episode(
            scene_id=scene_id,
            scene=SceneSpec.model_validate(meta["scene"]),
            rgb=torch.from_numpy(np.stack(rgbs)).permute(0, 3, 1, 2).contiguous(),
            mask=torch.from_numpy(np.stack(masks))[:, None],
            depth=torch.from_numpy(np.stack(depths).astype(np.float32))[:, None],
            extrinsics=CameraPose.from_vector(poses),
            focal=float(meta["focal"]),
            input_indices=list(meta["splits"]["input"]),
            eval_indices=list(meta["splits"]["eval"]),
        )
