"""Procedural scenes: a landmark field, a camera trajectory and splatted rasters.

Camera model: the camera looks along its local -x axis; local y points to
the right of the image and local z to its top. Pixel centers sit at
integer coordinates with the principal point at ``(G - 1) / 2``, so a
90 degree roll of the camera is exactly a 90 degree rotation of the raster.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.utils.pose_geometry import (
    ROTATION_CLASSES,
    EulerAngles,
    Pose,
    Quaternion,
    euler_to_quat,
    world_to_camera,
)
from app.utils.rng import substream

logger = logging.getLogger(__name__)

FORMAT_HEADER = "POSESYNTH v1"
MAX_BLIND_FRACTION = 0.10

Vec3 = Tuple[float, float, float]


class DegenerateSceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    n_landmarks: int = 60
    n_train: int = 500
    n_test: int = 100
    pose_center: Vec3 = (0.0, 0.0, 0.0)
    pose_extent: Vec3 = (4.0, 4.0, 1.0)
    orientation_spread: float = 10.0
    image_size: int = 16
    focal: float = 14.0
    landmark_offset: Vec3 = (-20.0, 0.0, 0.0)
    landmark_extent: Vec3 = (8.0, 12.0, 5.0)
    splat_sigma: float = 0.8
    jitter: bool = False
    scene_id: int = 0

    def __post_init__(self):
        for name in ("n_landmarks", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"scene {name} must be >= 1, got {getattr(self, name)}")
        for name in ("pose_extent", "landmark_extent"):
            values = tuple(float(v) for v in getattr(self, name))
            if len(values) != 3 or min(values) <= 0:
                raise ValueError(f"scene {name} must be three positive extents, got {values}")
            object.__setattr__(self, name, values)
        for name in ("pose_center", "landmark_offset"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.image_size < 2 or self.image_size % 2:
            raise ValueError(f"image_size must be even, got {self.image_size}")
        if self.focal <= 0 or self.splat_sigma <= 0:
            raise ValueError("focal and splat_sigma must be positive")

    @classmethod
    def from_section(cls, values: Dict, pose_center: Sequence[float], seed: int, scene_id: int = 0) -> "SceneConfig":
        return cls(seed=seed, pose_center=tuple(pose_center), scene_id=scene_id, **values)


@dataclass(eq=False)
class Observation:
    image: np.ndarray
    pose: Pose
    scene_id: int
    image_id: str = ""


@dataclass(eq=False)
class SceneDataset:
    train: List[Observation]
    test: List[Observation]
    config: SceneConfig
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def scene_id(self) -> int:
        return self.config.scene_id

    def images(self, split: str = "train") -> np.ndarray:
        items = getattr(self, split)
        return np.stack([o.image.reshape(-1) for o in items])

    def poses(self, split: str = "train") -> List[Pose]:
        return [o.pose for o in getattr(self, split)]


def look_at_orientation(position: Sequence[float], target: Sequence[float],
                        yaw_noise: float = 0.0, pitch_noise: float = 0.0, roll: float = 0.0) -> Quaternion:
    """Orientation whose optical axis (local -x) points from position to target."""
    d = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    d /= np.linalg.norm(d)
    # R e_x = (cos(yaw)cos(pitch), sin(yaw)cos(pitch), -sin(pitch)) must equal -d
    yaw = math.atan2(-d[1], -d[0])
    pitch = math.asin(max(-1.0, min(1.0, d[2])))
    return euler_to_quat(EulerAngles(yaw + yaw_noise, pitch + pitch_noise, roll))


def _project(pose: Pose, landmarks: np.ndarray, config: SceneConfig):
    cam = world_to_camera(pose, landmarks)
    depth = -cam[:, 0]
    front = depth > 1e-6
    center = (config.image_size - 1) / 2.0
    u = center + config.focal * cam[front, 1] / depth[front]
    v = center - config.focal * cam[front, 2] / depth[front]
    return u, v


def visible_count(pose: Pose, landmarks: np.ndarray, config: SceneConfig) -> int:
    u, v = _project(pose, landmarks, config)
    lo, hi = -0.5, config.image_size - 0.5
    return int(np.count_nonzero((u >= lo) & (u <= hi) & (v >= lo) & (v <= hi)))


def render_observation(pose: Pose, landmarks: np.ndarray, config: SceneConfig) -> np.ndarray:
    """Pinhole-project the landmarks and splat each as a Gaussian bump; max is 1."""
    landmarks = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
    size = config.image_size
    u, v = _project(pose, landmarks, config)
    margin = 4.0 * config.splat_sigma
    near = (u > -margin) & (u < size - 1 + margin) & (v > -margin) & (v < size - 1 + margin)
    u, v = u[near], v[near]
    image = np.zeros((size, size))
    if u.size == 0:
        return image
    grid = np.arange(size, dtype=np.float64)
    cols = np.exp(-((grid[None, :] - u[:, None]) ** 2) / (2 * config.splat_sigma ** 2))
    rows = np.exp(-((grid[None, :] - v[:, None]) ** 2) / (2 * config.splat_sigma ** 2))
    image = np.einsum("nr,nc->rc", rows, cols)
    peak = image.max()
    if peak <= 0:
        return np.zeros((size, size))
    return np.clip(image / peak, 0.0, 1.0)


def rotate_raster(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate clockwise by k degrees (row-major, origin at the top-left pixel)."""
    if k not in ROTATION_CLASSES:
        raise ValueError(f"rotation must be one of {ROTATION_CLASSES}, got {k!r}")
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"rotate_raster needs a square raster, got shape {image.shape}")
    return np.ascontiguousarray(np.rot90(image, -(k // 90)))


def jitter_raster(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shift by at most one pixel along each axis, filling with zeros."""
    dy, dx = (int(v) for v in rng.integers(-1, 2, size=2))
    size = image.shape[0]
    out = np.zeros_like(image)
    src_r = slice(max(0, -dy), size - max(0, dy))
    dst_r = slice(max(0, dy), size - max(0, -dy))
    src_c = slice(max(0, -dx), size - max(0, dx))
    dst_c = slice(max(0, dx), size - max(0, -dx))
    out[dst_r, dst_c] = image[src_r, src_c]
    return out


def _sample_poses(config: SceneConfig, centroid: np.ndarray, count: int) -> List[Pose]:
    rng = substream(config.seed, "trajectory", config.scene_id)
    center = np.array(config.pose_center)
    extent = np.array(config.pose_extent)
    spread = math.radians(config.orientation_spread)
    poses = []
    for _ in range(count):
        position = center + rng.uniform(-1.0, 1.0, size=3) * extent
        yaw_n, pitch_n, roll_n = rng.uniform(-spread, spread, size=3)
        q = look_at_orientation(position, centroid, yaw_n, pitch_n, roll_n)
        poses.append(Pose(tuple(position), q))
    return poses


def generate_scene(config: SceneConfig) -> SceneDataset:
    landmark_rng = substream(config.seed, "landmarks", config.scene_id)
    box_center = np.array(config.pose_center) + np.array(config.landmark_offset)
    landmarks = box_center + landmark_rng.uniform(-1.0, 1.0, size=(config.n_landmarks, 3)) * np.array(config.landmark_extent)
    centroid = landmarks.mean(axis=0)

    total = config.n_train + config.n_test
    poses = _sample_poses(config, centroid, total)
    blind = sum(1 for p in poses if visible_count(p, landmarks, config) == 0)
    if blind > MAX_BLIND_FRACTION * total:
        raise DegenerateSceneError(
            f"degenerate scene geometry: {blind}/{total} cameras see no landmark (scene {config.scene_id}, seed {config.seed})"
        )

    noise_rng = substream(config.seed, "noise", config.scene_id)
    train, test = [], []
    for idx, pose in enumerate(poses):
        image = render_observation(pose, landmarks, config)
        split = "train" if idx < config.n_train else "test"
        if split == "train" and config.jitter:
            image = jitter_raster(image, noise_rng)
        frame = idx if split == "train" else idx - config.n_train
        obs = Observation(image, pose, config.scene_id, f"scene{config.scene_id}/{split}/frame{frame:05d}")
        (train if split == "train" else test).append(obs)
    logger.debug(f"Generated scene {config.scene_id} (seed {config.seed}): {len(train)} train / {len(test)} test")
    return SceneDataset(train, test, config, landmarks)


# POSESYNTH v1 persistence

def _format_record(obs: Observation) -> str:
    values = " ".join(repr(float(v)) for v in obs.pose.as_vector())
    return f"{obs.image_id} {values} {obs.scene_id}"


def save_scene(dataset: SceneDataset, path: str) -> None:
    """Write ``path`` (pose records) and ``path + '.npz'`` (rasters by image_id)."""
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(FORMAT_HEADER + "\n")
        for obs in dataset.train + dataset.test:
            fh.write(_format_record(obs) + "\n")
    blobs = {obs.image_id: obs.image for obs in dataset.train + dataset.test}
    meta = json.dumps(asdict(dataset.config))
    with open(path + ".npz", "wb") as fh:
        np.savez(fh, __config__=np.array(meta), __landmarks__=dataset.landmarks, **blobs)


def load_scene(path: str) -> SceneDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise ValueError(f"{path}: expected header {FORMAT_HEADER!r}")
    with np.load(path + ".npz", allow_pickle=False) as blob:
        config = SceneConfig(**json.loads(str(blob["__config__"])))
        landmarks = np.array(blob["__landmarks__"])
        train, test = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 9:
                raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(tokens)}")
            image_id = tokens[0]
            values = [float(v) for v in tokens[1:8]]
            # stored quaternions are already unit and canonical
            pose = Pose(tuple(values[:3]), Quaternion.from_array(values[3:]))
            obs = Observation(np.array(blob[image_id]), pose, int(tokens[8]), image_id)
            (test if "/test/" in image_id else train).append(obs)
    return SceneDataset(train, test, config, landmarks)
