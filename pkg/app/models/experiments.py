"""Adaptation tasks and the method comparison built on top of APANet."""
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.models.apanet import (
    ApanetModel,
    LabeledSet,
    TrainConfig,
    TrainingData,
    encode,
    fit,
    predict_batch,
)
from app.utils import autodiff as ad
from app.utils.autodiff import Adam, Tensor
from app.utils.pose_geometry import ErrorPair, Pose, compose_pose, errors_from_arrays, pose_errors, relative_pose
from app.utils.rng import substream
from app.utils.scene_synth import Observation, SceneConfig, SceneDataset, generate_scene

logger = logging.getLogger(__name__)

METHODS = ("no_adaptation", "joint", "ss", "apanet", "apanets")
SWEEP_METHODS = ("ss", "apanet", "apanets")
TASK_MODES = ("ape", "rpe")


@dataclass
class AdaptationTask:
    sources: List[SceneDataset]
    target: SceneDataset
    nu: float
    mode: str = "ape"
    seed: int = 0
    anchor_stride: int = 10
    name: str = ""

    def __post_init__(self):
        if not self.sources:
            raise ValueError("an adaptation task needs at least one source scene")
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu must be in [0, 1], got {self.nu}")
        if self.mode not in TASK_MODES:
            raise ValueError(f"task mode must be one of {TASK_MODES}, got {self.mode!r}")
        if any(s is self.target for s in self.sources):
            raise ValueError("the target scene cannot also be a source")
        if self.anchor_stride < 1:
            raise ValueError("anchor_stride must be >= 1")

    @property
    def task_id(self) -> str:
        if self.name:
            return self.name
        sources = "+".join(f"scene{s.scene_id}" for s in self.sources)
        return f"{sources}->scene{self.target.scene_id}:{self.mode}"


def build_task(scene_section: Dict[str, Any], task_section: Dict[str, Any], nu: float = 0.0,
               seed: Optional[int] = None, name: str = "") -> AdaptationTask:
    """Generate the source scenes and the target scene described by the ``task`` section."""
    seed = task_section["seed"] if seed is None else seed
    centers = list(task_section["source_centers"])
    sources = [generate_scene(SceneConfig.from_section(scene_section, c, seed, scene_id=i)) for i, c in enumerate(centers)]
    target = generate_scene(SceneConfig.from_section(scene_section, task_section["target_center"], seed, scene_id=len(centers)))
    return AdaptationTask(sources, target, nu, task_section["mode"], seed,
                          task_section["anchor_stride"], name)


def labeled_indices(n: int, nu: float, seed: int) -> np.ndarray:
    """Seeded uniform subset of size round(nu * n) of the target train set."""
    size = int(math.floor(nu * n + 0.5))
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(substream(seed, "labeled_target").choice(n, size=size, replace=False))


def corrupt_orientations(dataset: SceneDataset, seed: int) -> SceneDataset:
    """Copy of ``dataset`` whose orientation labels are shuffled among its images."""
    rng = substream(seed, "corrupt", dataset.scene_id)

    def shuffle(items: List[Observation]) -> List[Observation]:
        order = rng.permutation(len(items))
        return [Observation(o.image, Pose(o.pose.t, items[j].pose.q), o.scene_id, o.image_id)
                for o, j in zip(items, order)]
    return SceneDataset(shuffle(dataset.train), shuffle(dataset.test), dataset.config, dataset.landmarks)


# Anchors (relative pose estimation)

@dataclass
class AnchorSet:
    images: np.ndarray
    poses: List[Pose]

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], stride: int) -> Optional["AnchorSet"]:
        chosen = list(observations)[::stride]
        if not chosen:
            return None
        return cls(np.stack([o.image for o in chosen]), [o.pose for o in chosen])

    def nearest_by_position(self, pose: Pose) -> Pose:
        positions = np.array([p.t for p in self.poses])
        return self.poses[int(np.argmin(np.linalg.norm(positions - pose.position, axis=1)))]

    def nearest_by_image(self, image: np.ndarray) -> Pose:
        flat = self.images.reshape(len(self.poses), -1)
        return self.poses[int(np.argmin(np.linalg.norm(flat - image.reshape(1, -1), axis=1)))]


def _labeled_set(observations: Sequence[Observation], anchors: Optional[AnchorSet]) -> LabeledSet:
    images = np.stack([o.image for o in observations])
    if anchors is None:
        return LabeledSet(images, [o.pose for o in observations])
    return LabeledSet(images, [relative_pose(anchors.nearest_by_position(o.pose), o.pose) for o in observations])


@dataclass
class PredictionSet:
    image_ids: List[str]
    predicted: np.ndarray
    truth: np.ndarray

    def errors(self) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [(Pose.from_vector(p), Pose.from_vector(t)) for p, t in zip(self.predicted, self.truth)]
        return pose_errors(pairs)

    def medians(self) -> ErrorPair:
        return errors_from_arrays(*self.errors())


def _evaluate(model: ApanetModel, observations: Sequence[Observation], anchors: Optional[AnchorSet]) -> PredictionSet:
    images = np.stack([o.image for o in observations])
    predicted = predict_batch(model, images)
    if anchors is not None:
        predicted = [compose_pose(anchors.nearest_by_image(o.image), p) for o, p in zip(observations, predicted)]
    return PredictionSet(
        [o.image_id for o in observations],
        np.array([p.as_vector() for p in predicted]),
        np.array([o.pose.as_vector() for o in observations]),
    )


@dataclass(eq=False)
class RunReport:
    task_id: str
    method: str
    nu: float
    seed: int
    mode: str
    target: ErrorPair
    target_predictions: PredictionSet
    source: Optional[ErrorPair] = None
    source_predictions: Optional[PredictionSet] = None
    curves: Dict[str, List[float]] = field(default_factory=dict)
    probe_accuracy: Optional[float] = None
    wall_clock: float = 0.0
    config: Dict[str, Any] = field(default_factory=dict)
    model: Optional[ApanetModel] = None

    @property
    def run_id(self) -> str:
        return f"{self.task_id}|{self.method}|nu={self.nu!r}|seed={self.seed}"

    def to_record(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "task_id": self.task_id,
            "method": self.method,
            "nu": self.nu,
            "seed": self.seed,
            "mode": self.mode,
            "target": asdict(self.target),
            "source": asdict(self.source) if self.source is not None else None,
            "curves": self.curves,
            "probe_accuracy": self.probe_accuracy,
            "wall_clock": self.wall_clock,
            "config": self.config,
        }


def method_config(method: str, nu: float, config: TrainConfig, seed: int) -> TrainConfig:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "no_adaptation":
        return replace(config, mode=method, alpha=0.0, nu=0.0, seed=seed)
    if method == "joint":
        return replace(config, mode=method, alpha=0.0, nu=1.0, seed=seed)
    if method == "ss":
        if nu <= 0.0:
            raise ValueError("method 'ss' needs a labeled target fraction nu > 0")
        return replace(config, mode=method, alpha=0.0, nu=nu, seed=seed)
    return replace(config, mode=method, nu=nu, seed=seed)


def _image_size(task: AdaptationTask) -> int:
    return int(task.target.train[0].image.size)


def run_method(task: AdaptationTask, method: str, config: TrainConfig, probe: bool = True,
               keep_model: bool = False) -> RunReport:
    """Train one of the five compared models on ``task`` and report its target-test medians.

    ``keep_model`` attaches the trained network to the report (for checkpointing).
    """
    cfg = method_config(method, task.nu, config, task.seed)
    started = time.perf_counter()
    rpe = task.mode == "rpe"

    source_anchors = [AnchorSet.from_observations(s.train, task.anchor_stride) if rpe else None for s in task.sources]
    sources = [_labeled_set(s.train, a) for s, a in zip(task.sources, source_anchors)]

    labeled_obs = [task.target.train[i] for i in labeled_indices(len(task.target.train), cfg.nu, task.seed)]
    target_anchors = AnchorSet.from_observations(labeled_obs, task.anchor_stride) if rpe and labeled_obs else None
    labeled = _labeled_set(labeled_obs, target_anchors) if labeled_obs else None

    data = TrainingData(sources, np.stack([o.image for o in task.target.train]), labeled)
    model = ApanetModel(_image_size(task), cfg)
    history = fit(model, data, cfg, run_id=f"{task.task_id}/{method}")

    eval_anchors = None
    if rpe:
        eval_anchors = target_anchors or _merge_anchors([a for a in source_anchors if a is not None])
    target_predictions = _evaluate(model, task.target.test, eval_anchors)

    source_error, source_predictions = None, None
    if method == "joint":
        per_scene = [_evaluate(model, s.test, a) for s, a in zip(task.sources, source_anchors)]
        source_predictions = PredictionSet(
            [i for p in per_scene for i in p.image_ids],
            np.concatenate([p.predicted for p in per_scene]),
            np.concatenate([p.truth for p in per_scene]),
        )
        source_error = source_predictions.medians()

    probe_accuracy = None
    if probe:
        probe_accuracy = feature_probe_accuracy(model, task.sources, task.target, task.seed)

    report = RunReport(
        task_id=task.task_id,
        method=method,
        nu=cfg.nu,
        seed=task.seed,
        mode=task.mode,
        target=target_predictions.medians(),
        target_predictions=target_predictions,
        source=source_error,
        source_predictions=source_predictions,
        curves={key: history.curve(key) for key in ("source_loss", "target_loss", "disc_loss", "disc_accuracy")},
        probe_accuracy=probe_accuracy,
        wall_clock=time.perf_counter() - started,
        config=json.loads(json.dumps(asdict(cfg))),
        model=model if keep_model else None,
    )
    logger.info(f"[{report.run_id}] target {report.target.position_error:.3f} m / "
                f"{report.target.orientation_error:.2f} deg in {report.wall_clock:.1f}s")
    return report


def _merge_anchors(sets: List[AnchorSet]) -> Optional[AnchorSet]:
    if not sets:
        return None
    return AnchorSet(np.concatenate([a.images for a in sets]), [p for a in sets for p in a.poses])


# Scene invariance

def feature_probe_accuracy(model: ApanetModel, sources: Sequence[SceneDataset], target: SceneDataset,
                           seed: int, epochs: int = 200, lr: float = 1e-2, hidden: int = 64) -> float:
    """Held-out accuracy of a fresh source-vs-target classifier on frozen encoder features."""
    def features(split: str) -> Tuple[np.ndarray, np.ndarray]:
        src = np.concatenate([encode(model, s.images(split)) for s in sources])
        tgt = encode(model, target.images(split))
        return np.concatenate([src, tgt]), np.concatenate([np.zeros(len(src), np.int64), np.ones(len(tgt), np.int64)])

    train_x, train_y = features("train")
    test_x, test_y = features("test")
    # reweight so both scenes count equally regardless of their sizes
    weights = np.where(train_y == 1, 0.5 / max(1, train_y.sum()), 0.5 / max(1, (1 - train_y).sum()))
    rng = substream(seed, "feature_probe")
    dim = train_x.shape[1]
    w1 = Tensor(rng.uniform(-1, 1, size=(dim, hidden)) * math.sqrt(6.0 / dim), requires_grad=True)
    b1 = Tensor(np.zeros(hidden), requires_grad=True)
    w2 = Tensor(rng.uniform(-1, 1, size=(hidden, 2)) * math.sqrt(6.0 / hidden), requires_grad=True)
    b2 = Tensor(np.zeros(2), requires_grad=True)
    optimizer = Adam([w1, b1, w2, b2], lr)
    scale = float(np.abs(train_x).max()) or 1.0

    def logits(x: np.ndarray) -> Tensor:
        hidden_out = ad.relu(ad.add(ad.matmul(Tensor(x / scale), w1), b1))
        return ad.add(ad.matmul(hidden_out, w2), b2)

    for _ in range(epochs):
        optimizer.zero_grad()
        ce = ad.softmax_cross_entropy(logits(train_x), train_y)
        ad.backward(ad.total(ad.mul(ce, Tensor(weights))))
        optimizer.step()
    predicted = np.argmax(logits(test_x).data, axis=1)
    return float(np.mean(predicted == test_y))


# Sweeps and probes

@dataclass
class Cell:
    task: AdaptationTask
    method: str
    config: TrainConfig
    probe: bool = True


def _run_cell(cell: Cell) -> RunReport:
    return run_method(cell.task, cell.method, cell.config, cell.probe)


def run_cells(cells: Sequence[Cell], jobs: int = 1) -> List[RunReport]:
    """Run independent cells, in parallel when jobs > 1; results keep the cell order."""
    if jobs <= 1 or len(cells) <= 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, cells))


def seed_values(base_seed: int, count: int) -> List[int]:
    return [base_seed + i for i in range(count)]


def compare_methods(task: AdaptationTask, config: TrainConfig, seeds: Sequence[int],
                    methods: Sequence[str] = METHODS, jobs: int = 1) -> List[RunReport]:
    cells = [Cell(replace(task, seed=s), m, config) for s in seeds for m in methods]
    return run_cells(cells, jobs)


def nu_sweep(task: AdaptationTask, nus: Sequence[float], config: TrainConfig, seeds: Sequence[int],
             methods: Sequence[str] = SWEEP_METHODS, jobs: int = 1) -> List[RunReport]:
    """One run per (method, nu, seed)."""
    for nu in nus:
        if not 0.0 <= nu <= 1.0:
            raise ValueError(f"nu values must be in [0, 1], got {nu}")
    cells = [Cell(replace(task, nu=nu, seed=s), m, config) for m in methods for nu in nus for s in seeds]
    return run_cells(cells, jobs)


def aggregate(reports: Sequence[RunReport]) -> Dict[Tuple[str, float], ErrorPair]:
    """Median over seeds of each run's median errors, keyed by (method, nu)."""
    grouped: Dict[Tuple[str, float], List[ErrorPair]] = {}
    for r in reports:
        grouped.setdefault((r.method, r.nu), []).append(r.target)
    return {
        key: ErrorPair(float(np.median([e.position_error for e in errs])),
                       float(np.median([e.orientation_error for e in errs])))
        for key, errs in grouped.items()
    }


@dataclass
class ProbeResult:
    source: ErrorPair
    target: ErrorPair
    adaptable: bool
    source_threshold: ErrorPair
    target_threshold: ErrorPair
    joint: Optional[RunReport] = None


def single_scene_error(scene: SceneDataset, config: TrainConfig, seed: int) -> ErrorPair:
    """Supervised error of a model trained and tested on one scene."""
    cfg = replace(config, mode="joint", alpha=0.0, nu=0.0, seed=seed)
    labeled = _labeled_set(scene.train, None)
    model = ApanetModel(int(scene.train[0].image.size), cfg)
    fit(model, TrainingData([labeled], labeled.images), cfg, run_id=f"single/scene{scene.scene_id}")
    return _evaluate(model, scene.test, None).medians()


def adaptability_probe(task: AdaptationTask, config: TrainConfig, probe_section: Dict[str, Any]) -> ProbeResult:
    """Train the joint model and decide whether a shared hypothesis exists.

    Default thresholds are ``threshold_factor`` times the single-scene
    supervised error of the source scenes, used for both sides. A target
    threshold taken from a model trained on the target's own labels would
    absorb corrupted target labels and hide the failure being tested for.
    """
    joint = run_method(task, "joint", config, probe=False)
    factor = probe_section["threshold_factor"]
    reference = None
    if not all(probe_section[k] > 0 for k in ("source_threshold_m", "target_threshold_m",
                                              "source_threshold_deg", "target_threshold_deg")):
        singles = [single_scene_error(s, config, task.seed) for s in task.sources]
        reference = ErrorPair(float(np.mean([e.position_error for e in singles])),
                              float(np.mean([e.orientation_error for e in singles])))

    def threshold(side: str) -> ErrorPair:
        pos = probe_section[f"{side}_threshold_m"] or factor * reference.position_error
        ang = probe_section[f"{side}_threshold_deg"] or factor * reference.orientation_error
        return ErrorPair(pos, ang)

    source_limit, target_limit = threshold("source"), threshold("target")

    def within(err: ErrorPair, limit: ErrorPair) -> bool:
        return err.position_error <= limit.position_error and err.orientation_error <= limit.orientation_error

    adaptable = within(joint.source, source_limit) and within(joint.target, target_limit)
    logger.info(f"[{task.task_id}] adaptability: joint source {joint.source}, target {joint.target}, adaptable={adaptable}")
    return ProbeResult(joint.source, joint.target, adaptable, source_limit, target_limit, joint)
