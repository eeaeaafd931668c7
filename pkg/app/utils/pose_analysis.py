"""Dataset-shift statistics over real or synthetic pose annotation files.

Relative poses are treated as 6D points ``(t, rho * axis_angle)``: meters for
the translation block, radians scaled by ``rho`` (meters per radian) for
the rotation block.
"""
import itertools
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from app.utils.pose_geometry import Pose, Quaternion, canonical_sign, relative_pose
from app.utils.scene_synth import FORMAT_HEADER

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-2
CAMBRIDGE_HEADER = ("Visual Landmark Dataset V1", "ImageFile, Camera Position [X Y Z W P Q R]", "")
QUERY_CHUNK = 512


class PoseFileError(ValueError):
    pass


@dataclass(frozen=True)
class PoseRecord:
    image_id: str
    pose: Pose
    scene: str = ""


@dataclass(frozen=True)
class Pose6D:
    translation: tuple
    rotation: tuple

    def as_array(self, rho: float = 1.0) -> np.ndarray:
        return np.concatenate([np.asarray(self.translation), rho * np.asarray(self.rotation)])


# Parsing

def _reals(tokens: Sequence[str]) -> Optional[List[float]]:
    try:
        values = [float(t) for t in tokens]
    except ValueError:
        return None
    return values if all(math.isfinite(v) for v in values) else None


def _ingest_quaternion(values: Sequence[float], where: str) -> Quaternion:
    q = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(q))
    if norm <= 1e-12:
        raise PoseFileError(f"{where}: degenerate quaternion {list(values)}")
    if abs(norm - 1.0) > NORM_TOLERANCE:
        logger.warning(f"{where}: quaternion norm {norm:.6g} is not unit, renormalizing")
    if abs(norm - 1.0) > 1e-12:
        q = q / norm
    return Quaternion.from_array(canonical_sign(q))


def parse_pose_file(path: str, strict: bool = True, scene: Optional[str] = None) -> List[PoseRecord]:
    """Read a Cambridge-style annotation file (or a synthetic scene file).

    Leading lines are skipped until the first line with at least 8 tokens
    whose last 7 parse as reals (``tx ty tz qw qx qy qz``). Later lines
    that do not conform abort the parse in strict mode and are skipped
    with a warning otherwise.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise PoseFileError(f"cannot read pose file {path}: {e}") from e
    if scene is None:
        scene = os.path.basename(os.path.dirname(os.path.abspath(path)))

    synthetic = bool(lines) and lines[0].strip() == FORMAT_HEADER
    records: List[PoseRecord] = []
    started = synthetic
    for lineno, line in enumerate(lines[1:] if synthetic else lines, start=2 if synthetic else 1):
        tokens = line.split()
        if synthetic:
            # image_id, 7 pose values, scene id
            values = _reals(tokens[1:8]) if len(tokens) == 9 else None
            record_scene = f"scene{tokens[8]}" if values is not None else scene
        else:
            values = _reals(tokens[-7:]) if len(tokens) >= 8 else None
            record_scene = scene
        if values is None:
            if not started or not tokens:
                continue
            message = f"{path}:{lineno}: malformed pose line {line.strip()!r}"
            if strict:
                raise PoseFileError(message)
            logger.warning(message + ", skipped")
            continue
        started = True
        image_id = " ".join(tokens[:-7]) if not synthetic else tokens[0]
        q = _ingest_quaternion(values[3:], f"{path}:{lineno}")
        records.append(PoseRecord(image_id, Pose(tuple(values[:3]), q), record_scene))
    if not records:
        raise PoseFileError(f"unrecognized pose file: {path}")
    logger.debug(f"Parsed {len(records)} pose records from {path}")
    return records


def write_pose_file(records: Sequence[PoseRecord], path: str) -> None:
    """Write records in the Cambridge layout (3-line header, then one pose per line)."""
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for line in CAMBRIDGE_HEADER:
            fh.write(line + "\n")
        for r in records:
            values = " ".join(repr(float(v)) for v in r.pose.as_vector())
            fh.write(f"{r.image_id} {values}\n")


# 6D clouds

def to_6d(p: Pose) -> Pose6D:
    """Translation plus minimal axis-angle (angle in [0, pi])."""
    q = p.q.as_array()
    if q[0] < 0:
        q = -q
    sin_half = float(np.linalg.norm(q[1:]))
    if sin_half == 0.0:
        return Pose6D(tuple(p.t), (0.0, 0.0, 0.0))
    angle = 2.0 * math.atan2(sin_half, float(q[0]))
    return Pose6D(tuple(p.t), tuple(float(v) for v in q[1:] * (angle / sin_half)))


def relative_cloud(records: Sequence[PoseRecord], anchor_stride: int = 10) -> List[Pose6D]:
    """Every record expressed relative to its nearest anchor (by position)."""
    if not records:
        raise ValueError("relative_cloud needs at least one record")
    if anchor_stride < 1:
        raise ValueError(f"anchor stride must be >= 1, got {anchor_stride}")
    anchors = [r.pose for r in records[::anchor_stride]]
    anchor_positions = np.stack([a.position for a in anchors])
    cloud = []
    for r in records:
        nearest = int(np.argmin(np.sum((anchor_positions - r.pose.position) ** 2, axis=1)))
        cloud.append(to_6d(relative_pose(anchors[nearest], r.pose)))
    return cloud


def cloud_array(cloud: Sequence[Pose6D], rho: float = 1.0) -> np.ndarray:
    return np.array([p.as_array(rho) for p in cloud], dtype=np.float64).reshape(-1, 6)


# Statistics

def mean_pairwise_distance(cloud: Sequence[Pose6D], rho: float = 1.0) -> float:
    points = cloud_array(cloud, rho)
    if len(points) < 2:
        raise ValueError("mean pairwise distance needs at least 2 points")
    return float(np.mean(pdist(points)))


def coverage_fraction(queries: Sequence[Pose6D], references: Sequence[Pose6D], tau: float,
                      rho: float = 1.0) -> float:
    """Fraction of queries with at least one reference within 6D distance ``tau``."""
    if not queries or not references:
        raise ValueError("coverage_fraction needs nonempty query and reference sets")
    if tau <= 0:
        raise ValueError(f"coverage radius must be positive, got {tau}")
    q, r = cloud_array(queries, rho), cloud_array(references, rho)
    covered = 0
    for start in range(0, len(q), QUERY_CHUNK):
        d2 = cdist(q[start:start + QUERY_CHUNK], r, "sqeuclidean")
        covered += int(np.count_nonzero(np.any(d2 <= tau * tau, axis=1)))
    return covered / len(q)


def ball_cells() -> np.ndarray:
    """Integer offsets of the grid cells (edge r/sqrt(6)) that meet the radius-r ball."""
    offsets = np.array(list(itertools.product(range(-2, 3), repeat=6)), dtype=np.int64)
    gap = np.maximum(0.0, np.abs(offsets) - 0.5)
    return offsets[np.sum(gap ** 2, axis=1) <= 6.0]


def occupancy_estimate(cloud: Sequence[Pose6D], radius: Optional[float] = None, rho: float = 1.0) -> float:
    """Voxel proxy for how much of the radius-r ball around the centroid the cloud fills.

    Cells have edge ``r / sqrt(6)`` and are centered on the centroid; the
    result is occupied cells over cells meeting the ball. ``r`` defaults to
    the mean pairwise distance.
    """
    points = cloud_array(cloud, rho)
    if len(points) < 2:
        raise ValueError("occupancy estimate needs at least 2 points")
    if radius is None:
        radius = float(np.mean(pdist(points)))
    if radius < 0:
        raise ValueError(f"occupancy radius must be non-negative, got {radius}")
    cells = ball_cells()
    centroid = points.mean(axis=0)
    if radius == 0.0:
        # every point lies on the centroid
        return 1.0 / len(cells)
    edge = radius / math.sqrt(6.0)
    index = np.floor((points - centroid) / edge + 0.5).astype(np.int64)
    occupied = {tuple(row) for row in index}
    inside = sum(1 for cell in map(tuple, cells) if cell in occupied)
    return inside / len(cells)


def _cloud_for(paths: Sequence[str], anchor_stride: int, strict: bool) -> List[Pose6D]:
    cloud: List[Pose6D] = []
    for path in paths:
        cloud.extend(relative_cloud(parse_pose_file(path, strict=strict), anchor_stride))
    return cloud


def analyze(queries: Sequence[str], references: Sequence[str], anchor_stride: int = 10, rho: float = 1.0,
            tau: float = 0.0, strict: bool = True) -> Dict[str, object]:
    """Coverage of the query files' relative poses by the (concatenated) reference files.

    ``tau <= 0`` selects the mean pairwise distance of the reference cloud.
    """
    query_cloud = _cloud_for(queries, anchor_stride, strict)
    reference_cloud = _cloud_for(references, anchor_stride, strict)
    resolved_tau = tau if tau > 0 else mean_pairwise_distance(reference_cloud, rho)
    if resolved_tau <= 0:
        raise ValueError("reference cloud has zero spread; pass an explicit tau")
    summary: Dict[str, object] = {
        "queries": ";".join(queries),
        "references": ";".join(references),
        "anchor_stride": anchor_stride,
        "rho": rho,
        "tau": resolved_tau,
        "n_query": len(query_cloud),
        "n_reference": len(reference_cloud),
        "coverage": coverage_fraction(query_cloud, reference_cloud, resolved_tau, rho),
        "query_occupancy": occupancy_estimate(query_cloud, rho=rho) if len(query_cloud) > 1 else float("nan"),
        "reference_occupancy": occupancy_estimate(reference_cloud, rho=rho),
    }
    logger.info(f"Coverage {summary['coverage']:.4f} at tau={resolved_tau:.4g} "
                f"({len(query_cloud)} queries, {len(reference_cloud)} references)")
    return summary
