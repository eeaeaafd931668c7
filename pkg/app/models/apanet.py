"""Adversarial pose adaptation network.

An MLP encoder feeds a pose regressor (a localizer layer followed by
separate position / orientation heads) and a scene discriminator.
Training alternates a discriminator step on frozen features with a
regressor step that lowers the pose loss while raising the
discriminator's cross-entropy, or runs both at once through gradient
reversal.
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.utils import autodiff as ad
from app.utils.autodiff import Adam, Tensor
from app.utils.pose_geometry import (
    DegenerateQuaternionError,
    Pose,
    ROTATION_CLASSES,
    apply_image_rotation_to_pose,
    canonicalize_array,
)
from app.utils.rng import substream
from app.utils.scene_synth import rotate_raster

logger = logging.getLogger(__name__)

MODES = ("no_adaptation", "joint", "ss", "apanet", "apanets")
OPTIMIZATIONS = ("alternating", "grl")
CHECKPOINT_MAGIC = b"APANET"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 16
    alpha: float = 1.0
    nu: float = 0.0
    epochs: int = 200
    seed: int = 0
    mode: str = "apanet"
    optimization: str = "alternating"
    grl_lambda: float = 1.0
    encoder_hidden: Tuple[int, ...] = (256, 128)
    localizer_units: int = 1024
    head_units: int = 256
    discriminator_hidden: Tuple[int, ...] = (1024, 256, 64)
    dropout: float = 0.5
    s_t_init: float = 0.0
    s_q_init: float = -1.0
    rotation_class_head: bool = False
    rotation_prob: float = 0.5
    early_stop: bool = False
    early_stop_window: int = 10
    early_stop_tol: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu must be in [0, 1], got {self.nu}")
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.optimization not in OPTIMIZATIONS:
            raise ValueError(f"unknown optimization {self.optimization!r}; expected one of {OPTIMIZATIONS}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.alpha < 0 or self.grl_lambda < 0:
            raise ValueError("alpha and grl_lambda must be >= 0")
        object.__setattr__(self, "encoder_hidden", tuple(int(v) for v in self.encoder_hidden))
        object.__setattr__(self, "discriminator_hidden", tuple(int(v) for v in self.discriminator_hidden))
        if not self.encoder_hidden:
            raise ValueError("encoder needs at least one hidden layer")

    @classmethod
    def from_section(cls, values: Dict, **overrides) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        merged = {k: v for k, v in values.items() if k in known}
        merged.update(overrides)
        return cls(**merged)

    @property
    def self_supervised(self) -> bool:
        return self.mode == "apanets"


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        bound = math.sqrt(6.0 / n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


def _stack(sizes: Sequence[int], rng, prefix: str) -> List[Linear]:
    return [Linear(a, b, rng, f"{prefix}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]


class ApanetModel:
    """Encoder, localizer, position and orientation heads, discriminator and the loss weights s_t, s_q."""

    def __init__(self, input_dim: int, config: TrainConfig):
        self.input_dim = int(input_dim)
        self.config = config
        self.step = 0
        rng = substream(config.seed, "init")
        self.encoder = _stack((self.input_dim,) + config.encoder_hidden, rng, "encoder")
        feature_dim = config.encoder_hidden[-1]
        self.localizer = Linear(feature_dim, config.localizer_units, rng, "localizer")
        self.position_head = _stack((config.localizer_units, config.head_units, 3), rng, "position_head")
        self.orientation_head = _stack((config.localizer_units, config.head_units, 4), rng, "orientation_head")
        self.orientation_head[-1].bias.data[:] = [1.0, 0.0, 0.0, 0.0]
        self.discriminator = _stack((feature_dim,) + config.discriminator_hidden + (2,), rng, "discriminator")
        self.rotation_head = (
            Linear(config.localizer_units, len(ROTATION_CLASSES), rng, "rotation_head")
            if config.rotation_class_head else None
        )
        self.s_t = Tensor(config.s_t_init, requires_grad=True, name="s_t")
        self.s_q = Tensor(config.s_q_init, requires_grad=True, name="s_q")

    @property
    def feature_dim(self) -> int:
        return self.config.encoder_hidden[-1]

    def regressor_parameters(self) -> List[Tensor]:
        params = []
        for layer in self.encoder + [self.localizer] + self.position_head + self.orientation_head:
            params += layer.parameters()
        if self.rotation_head is not None:
            params += self.rotation_head.parameters()
        return params + [self.s_t, self.s_q]

    def discriminator_parameters(self) -> List[Tensor]:
        return [p for layer in self.discriminator for p in layer.parameters()]

    def parameters(self) -> List[Tensor]:
        return self.regressor_parameters() + self.discriminator_parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def fingerprint(self, params: Optional[Sequence[Tensor]] = None) -> str:
        digest = hashlib.sha256()
        for p in params if params is not None else self.parameters():
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    # Forward pieces

    def encode(self, x: Tensor) -> Tensor:
        for layer in self.encoder:
            x = ad.relu(layer(x))
        return x

    def localize(self, f: Tensor) -> Tensor:
        return ad.relu(self.localizer(f))

    def regress(self, h: Tensor) -> Tensor:
        t = ad.relu(self.position_head[0](h))
        q = ad.relu(self.orientation_head[0](h))
        return ad.concat([self.position_head[1](t), self.orientation_head[1](q)], axis=1)

    def discriminate(self, f: Tensor, rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
        for layer in self.discriminator[:-1]:
            f = ad.dropout(ad.relu(layer(f)), self.config.dropout, rng, training)
        return self.discriminator[-1](f)

    def forward(self, images: np.ndarray) -> Tensor:
        return self.regress(self.localize(self.encode(_input(images))))


def _input(images: np.ndarray) -> Tensor:
    images = np.asarray(images, dtype=np.float64)
    return Tensor(images.reshape(images.shape[0], -1))


@dataclass
class Batch:
    images: np.ndarray
    targets: Optional[List[Pose]] = None
    rotations: Optional[np.ndarray] = None

    def __len__(self):
        return int(self.images.shape[0])

    def target_array(self) -> np.ndarray:
        vectors = np.array([p.as_vector() for p in self.targets]).reshape(-1, 7)
        vectors[:, 3:] = canonicalize_array(vectors[:, 3:])
        return vectors


# Losses

def pose_loss(pred: Tensor, target, s_t: Tensor, s_q: Tensor) -> Tensor:
    """Per-sample ``|t - t^|_1 e^-s_t + s_t + |q - q^|_1 e^-s_q + s_q``.

    ``pred`` is (n, 7) (t then q); ``target`` a Pose, a list of poses or an
    (n, 7) array whose quaternions are already sign-canonical.
    """
    if isinstance(target, Pose):
        target = [target]
    if isinstance(target, (list, tuple)):
        target = Batch(np.zeros((len(target), 1)), list(target)).target_array()
    target = np.asarray(target, dtype=np.float64).reshape(-1, 7)
    if pred.data.ndim != 2 or pred.shape[1] != 7 or pred.shape[0] != target.shape[0]:
        raise ValueError(f"pose_loss: prediction shape {pred.shape} vs target {target.shape}")
    t_err = ad.l1_distance(ad.columns(pred, 0, 3), Tensor(target[:, :3]))
    q_err = ad.l1_distance(ad.columns(pred, 3, 7), Tensor(target[:, 3:]))
    position_term = ad.add(ad.mul(t_err, ad.exp(ad.negate(s_t))), s_t)
    orientation_term = ad.add(ad.mul(q_err, ad.exp(ad.negate(s_q))), s_q)
    return ad.add(position_term, orientation_term)


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ad.mean(per_sample)
    if reduction == "sum":
        return ad.total(per_sample)
    raise ValueError(f"unknown reduction {reduction!r}")


def source_pose_loss(model: ApanetModel, batch: Batch, reduction: str = "mean") -> Tensor:
    if batch is None or len(batch) == 0:
        raise ValueError("source_pose_loss needs a non-empty labeled batch")
    pred = model.forward(batch.images)
    return _reduce(pose_loss(pred, batch.target_array(), model.s_t, model.s_q), reduction)


def target_pose_loss(model: ApanetModel, batch: Optional[Batch], config: TrainConfig, reduction: str = "mean") -> Tensor:
    """Loss on the labeled target subset; exactly zero when no target labels are used."""
    if config.nu == 0.0 or batch is None or len(batch) == 0:
        return Tensor(0.0)
    pred = model.forward(batch.images)
    return _reduce(pose_loss(pred, batch.target_array(), model.s_t, model.s_q), reduction)


def scene_labels(n_source: int, n_target: int) -> np.ndarray:
    return np.concatenate([np.zeros(n_source, dtype=np.int64), np.ones(n_target, dtype=np.int64)])


def adversarial_loss(model: ApanetModel, source: Batch, target: Batch, config: TrainConfig,
                     rng: Optional[np.random.Generator] = None, training: bool = False) -> Tuple[Tensor, Tensor]:
    """Return (discriminator CE, confusion signal for the encoder).

    Alternating mode: the confusion signal is the negated CE through the encoder.
    GRL mode: it is the discriminator CE fed through a gradient reversal of the features.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("adversarial_loss needs non-empty source and target batches")
    features = model.encode(_input(np.concatenate([source.images, target.images])))
    labels = scene_labels(len(source), len(target))
    disc_loss = ad.mean(ad.softmax_cross_entropy(model.discriminate(features, rng, training), labels))
    if config.optimization == "grl":
        reversed_features = ad.gradient_reversal(features, config.grl_lambda)
        confusion = ad.mean(ad.softmax_cross_entropy(model.discriminate(reversed_features, rng, training), labels))
    else:
        confusion = ad.negate(disc_loss)
    return disc_loss, confusion


def rotation_class_loss(model: ApanetModel, batch: Batch) -> Tensor:
    if model.rotation_head is None or batch.rotations is None:
        return Tensor(0.0)
    logits = model.rotation_head(model.localize(model.encode(_input(batch.images))))
    return ad.mean(ad.softmax_cross_entropy(logits, batch.rotations))


def total_loss(model: ApanetModel, source: Batch, target: Batch, labeled: Optional[Batch], config: TrainConfig,
               rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
    """L_pose^s + L_pose^t + alpha * L_adv, with L_adv the encoder-side confusion term."""
    pose = ad.add(source_pose_loss(model, source), target_pose_loss(model, labeled, config))
    _, confusion = adversarial_loss(model, source, target, config, rng, training)
    return ad.add(pose, ad.scalar_mul(confusion, config.alpha))


# Self-supervision

def rotate_batch(batch: Batch, rng: np.random.Generator, prob: float, forced_k: Optional[int] = None) -> Batch:
    """With probability ``prob`` rotate an image by 90, 180 or 270 degrees and roll its target to match.

    The rest of the batch is left as is (class 0).
    """
    turns = ROTATION_CLASSES[1:]
    images, targets, classes = [], [], []
    for i in range(len(batch)):
        if forced_k is not None:
            k = forced_k
        elif rng.random() < prob:
            k = turns[int(rng.integers(0, len(turns)))]
        else:
            k = 0
        images.append(rotate_raster(batch.images[i], k))
        if batch.targets is not None:
            targets.append(apply_image_rotation_to_pose(batch.targets[i], k))
        classes.append(ROTATION_CLASSES.index(k))
    return Batch(np.stack(images), targets if batch.targets is not None else None, np.array(classes, dtype=np.int64))


def self_supervised_batch(model: ApanetModel, batch: Batch, config: TrainConfig,
                          rng: Optional[np.random.Generator] = None, forced_k: Optional[int] = None) -> Tensor:
    """Pose loss on rotated images with roll-adjusted targets (+ rotation CE when the head is on)."""
    if rng is None:
        rng = substream(config.seed, "rotation", model.step)
    rotated = rotate_batch(batch, rng, config.rotation_prob, forced_k)
    loss = source_pose_loss(model, rotated)
    if model.rotation_head is not None:
        loss = ad.add(loss, rotation_class_loss(model, rotated))
    return loss


# Training

@dataclass
class Optimizers:
    regressor: Adam
    discriminator: Adam
    joint: Adam


def make_optimizers(model: ApanetModel, config: TrainConfig) -> Optimizers:
    return Optimizers(
        regressor=Adam(model.regressor_parameters(), config.lr),
        discriminator=Adam(model.discriminator_parameters(), config.lr),
        joint=Adam(model.parameters(), config.lr),
    )


@dataclass
class StepReport:
    step: int
    source_loss: float
    target_loss: float
    disc_loss: float
    confusion: float
    rotation_loss: float
    total: float
    disc_accuracy: float


def _accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits.data, axis=1) == labels))


def train_step(model: ApanetModel, source: Batch, target: Batch, labeled: Optional[Batch], config: TrainConfig,
               optimizers: Optimizers, phases: Sequence[str] = ("discriminator", "regressor")) -> StepReport:
    """One minimax step. Phase 1 moves only the discriminator; phase 2 moves the encoder, regressor, s_t and s_q."""
    step = model.step
    rng = substream(config.seed, "dropout", step)
    try:
        if config.self_supervised:
            rot_rng = substream(config.seed, "rotation", step)
            source = rotate_batch(source, rot_rng, config.rotation_prob)
            if labeled is not None and len(labeled):
                labeled = rotate_batch(labeled, rot_rng, config.rotation_prob)
        if config.optimization == "grl":
            report = _grl_step(model, source, target, labeled, config, optimizers, rng)
        else:
            report = _alternating_step(model, source, target, labeled, config, optimizers, rng, phases)
    except ad.NonFiniteError as e:
        raise RuntimeError(f"training diverged at step {step}: {e}") from e
    if not math.isfinite(report.total):
        raise RuntimeError(f"training diverged at step {step}: non-finite loss")
    model.step += 1
    return report


def _pose_terms(model, source, labeled, config):
    source_loss = source_pose_loss(model, source)
    target_loss = target_pose_loss(model, labeled, config)
    rotation = Tensor(0.0)
    if model.rotation_head is not None and source.rotations is not None:
        rotation = rotation_class_loss(model, source)
    return source_loss, target_loss, rotation


def _alternating_step(model, source, target, labeled, config, optimizers, rng, phases) -> StepReport:
    labels = scene_labels(len(source), len(target))
    disc_loss_value, accuracy = float("nan"), float("nan")
    if "discriminator" in phases:
        model.zero_grad()
        frozen = Tensor(model.encode(_input(np.concatenate([source.images, target.images]))).data)
        logits = model.discriminate(frozen, rng, training=True)
        disc_loss = ad.mean(ad.softmax_cross_entropy(logits, labels))
        ad.backward(disc_loss)
        optimizers.discriminator.step()
        disc_loss_value, accuracy = disc_loss.item(), _accuracy(logits, labels)

    source_loss, target_loss, rotation = Tensor(0.0), Tensor(0.0), Tensor(0.0)
    confusion_value = 0.0
    total_value = float("nan")
    if "regressor" in phases:
        model.zero_grad()
        source_loss, target_loss, rotation = _pose_terms(model, source, labeled, config)
        loss = ad.add(ad.add(source_loss, target_loss), rotation)
        if config.alpha > 0:
            _, confusion = adversarial_loss(model, source, target, config, rng, training=True)
            confusion_value = confusion.item()
            loss = ad.add(loss, ad.scalar_mul(confusion, config.alpha))
        ad.backward(loss)
        optimizers.regressor.step()
        total_value = loss.item()
    model.zero_grad()
    return StepReport(model.step, source_loss.item(), target_loss.item(), disc_loss_value, confusion_value,
                      rotation.item(), total_value if "regressor" in phases else disc_loss_value, accuracy)


def _grl_step(model, source, target, labeled, config, optimizers, rng) -> StepReport:
    model.zero_grad()
    source_loss, target_loss, rotation = _pose_terms(model, source, labeled, config)
    features = model.encode(_input(np.concatenate([source.images, target.images])))
    labels = scene_labels(len(source), len(target))
    logits = model.discriminate(ad.gradient_reversal(features, config.grl_lambda), rng, training=True)
    disc_loss = ad.mean(ad.softmax_cross_entropy(logits, labels))
    loss = ad.add(ad.add(ad.add(source_loss, target_loss), rotation), ad.scalar_mul(disc_loss, config.alpha))
    ad.backward(loss)
    optimizers.joint.step()
    model.zero_grad()
    return StepReport(model.step, source_loss.item(), target_loss.item(), disc_loss.item(), -disc_loss.item(),
                      rotation.item(), loss.item(), _accuracy(logits, labels))


@dataclass
class LabeledSet:
    images: np.ndarray
    targets: List[Pose]

    def __len__(self):
        return int(self.images.shape[0])


@dataclass
class TrainingData:
    sources: List[LabeledSet]
    target_images: np.ndarray
    labeled_target: Optional[LabeledSet] = None


class _Cycler:
    """Endless index stream over successive seeded permutations."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def take(self, count: int) -> np.ndarray:
        out = []
        for _ in range(count):
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            out.append(self.order[self.pos])
            self.pos += 1
        return np.array(out, dtype=np.int64)


@dataclass
class History:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    stopped_early: bool = False

    def curve(self, key: str) -> List[float]:
        return [row[key] for row in self.epochs]


def _source_batch(data: TrainingData, cyclers: List[_Cycler], batch_size: int) -> Batch:
    # each source scene contributes an equal share of the batch
    images, targets = [], []
    n_sources = len(data.sources)
    for slot in range(batch_size):
        which = slot % n_sources
        idx = int(cyclers[which].take(1)[0])
        images.append(data.sources[which].images[idx])
        targets.append(data.sources[which].targets[idx])
    return Batch(np.stack(images), targets)


def fit(model: ApanetModel, data: TrainingData, config: TrainConfig, run_id: str = "") -> History:
    if not data.sources or any(len(s) == 0 for s in data.sources):
        raise ValueError("fit needs at least one non-empty labeled source set")
    if len(data.target_images) == 0:
        raise ValueError("fit needs target training images")
    rng = substream(config.seed, "batches")
    source_cyclers = [_Cycler(len(s), rng) for s in data.sources]
    target_cycler = _Cycler(len(data.target_images), rng)
    labeled = data.labeled_target if data.labeled_target is not None and len(data.labeled_target) else None
    labeled_cycler = _Cycler(len(labeled), rng) if labeled is not None else None
    optimizers = make_optimizers(model, config)
    steps = max(1, math.ceil(sum(len(s) for s in data.sources) / config.batch_size))
    history = History()
    keys = ("source_loss", "target_loss", "disc_loss", "rotation_loss", "total", "disc_accuracy")

    for epoch in range(config.epochs):
        sums = dict.fromkeys(keys, 0.0)
        for _ in range(steps):
            source = _source_batch(data, source_cyclers, config.batch_size)
            target = Batch(data.target_images[target_cycler.take(config.batch_size)])
            labeled_batch = None
            if labeled_cycler is not None:
                idx = labeled_cycler.take(config.batch_size)
                labeled_batch = Batch(labeled.images[idx], [labeled.targets[i] for i in idx])
            report = train_step(model, source, target, labeled_batch, config, optimizers)
            for key in keys:
                sums[key] += getattr(report, key)
        row = {key: value / steps for key, value in sums.items()}
        row["epoch"] = epoch
        history.epochs.append(row)
        logger.debug(f"[{run_id}] epoch {epoch}: pose {row['source_loss'] + row['target_loss']:.4f} "
                     f"disc {row['disc_loss']:.4f} acc {row['disc_accuracy']:.3f}")
        if config.early_stop and _plateaued(history, config):
            history.stopped_early = True
            logger.info(f"[{run_id}] early stop at epoch {epoch}")
            break
    return history


def _plateaued(history: History, config: TrainConfig) -> bool:
    window = config.early_stop_window
    if len(history.epochs) <= window:
        return False
    pose = [row["source_loss"] + row["target_loss"] for row in history.epochs]
    before, now = min(pose[:-window]), min(pose[-window:])
    return (before - now) <= config.early_stop_tol * max(abs(before), 1e-12)


# Inference

def encode(model: ApanetModel, images: np.ndarray) -> np.ndarray:
    return model.encode(_input(images)).data.copy()


def predict_batch(model: ApanetModel, images: np.ndarray) -> List[Pose]:
    raw = model.forward(images).data
    poses = []
    for row in raw:
        if np.linalg.norm(row[3:]) < 1e-12:
            raise DegenerateQuaternionError("degenerate orientation prediction")
        poses.append(Pose.from_vector(row))
    return poses


def predict(model: ApanetModel, image: np.ndarray) -> Pose:
    """Eval-mode pose of one image; the discriminator is not involved."""
    return predict_batch(model, np.asarray(image)[None, ...])[0]


# Checkpoints

def _named_parameters(model: ApanetModel) -> List[Tuple[str, Tensor]]:
    return [(p.name, p) for p in model.parameters()]


def save_model(model: ApanetModel, path: str) -> None:
    params = _named_parameters(model)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "input_dim": model.input_dim,
        "step": model.step,
        "config": asdict(model.config),
        "params": [[name, list(p.shape)] for name, p in params],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + str(CHECKPOINT_VERSION).encode("ascii") + b"\n")
        fh.write(json.dumps(manifest).encode("utf-8") + b"\n")
        for _, p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_model(path: str) -> ApanetModel:
    expected = (CHECKPOINT_MAGIC + str(CHECKPOINT_VERSION).encode("ascii")).decode("ascii")
    with open(path, "rb") as fh:
        header = fh.readline().rstrip(b"\n")
        if not header.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError(f"{path}: bad checkpoint header, expected magic {expected!r}")
        version = header[len(CHECKPOINT_MAGIC):]
        if version != str(CHECKPOINT_VERSION).encode("ascii"):
            raise CheckpointError(f"{path}: unsupported version {version.decode('ascii', 'replace')!r} (expected {expected!r})")
        try:
            manifest = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable manifest: {e}") from e
        payload = fh.read()
    config = TrainConfig(**manifest["config"])
    model = ApanetModel(manifest["input_dim"], config)
    model.step = int(manifest["step"])
    offset = 0
    named = dict(_named_parameters(model))
    for name, shape in manifest["params"]:
        if name not in named or list(named[name].shape) != list(shape):
            raise CheckpointError(f"{path}: parameter {name} {shape} does not match the model")
        size = int(np.prod(shape)) * 8
        if offset + size > len(payload):
            raise CheckpointError(f"{path}: truncated checkpoint at parameter {name}")
        named[name].data = np.frombuffer(payload[offset:offset + size], dtype="<f8").astype(np.float64).reshape(shape)
        offset += size
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes after the last parameter")
    return model


# Gradient checks

def _smooth_point(build, h: float, rng: np.random.Generator, tries: int = 50):
    """Resample until no relu / l1 input lies within 100h of its kink."""
    for _ in range(tries):
        fn, params = build(rng)
        if ad.Tape.from_loss(fn()).kink_margin() > 100 * h:
            return fn, params
    return fn, params


def gradcheck_suite(seed: int = 0, points: int = 20, h: float = 1e-4) -> Dict[str, float]:
    """Max relative finite-difference error over every loss path of the network."""
    rng = substream(seed, "gradcheck")
    cfg = TrainConfig(encoder_hidden=(6, 5), localizer_units=6, head_units=5, discriminator_hidden=(6, 5, 4),
                      nu=0.5, alpha=1.0, seed=seed, rotation_class_head=True)
    side = 4

    def poses(r, n):
        return [Pose.from_vector(np.concatenate([r.normal(size=3), r.normal(size=4)])) for _ in range(n)]

    def pose_path(r):
        pred = Tensor(r.normal(size=(3, 7)), requires_grad=True)
        s_t, s_q = Tensor(r.normal(), requires_grad=True), Tensor(r.normal(), requires_grad=True)
        target = poses(r, 3)
        return (lambda: ad.mean(pose_loss(pred, target, s_t, s_q))), [pred, s_t, s_q]

    def model_and_batches(r, config=cfg):
        model = ApanetModel(side * side, replace(config, seed=int(r.integers(1 << 30))))
        src = Batch(r.uniform(size=(2, side, side)), poses(r, 2))
        tgt = Batch(r.uniform(size=(2, side, side)), poses(r, 2))
        return model, src, tgt

    def regressor(r):
        model, src, _ = model_and_batches(r)
        return (lambda: source_pose_loss(model, src)), model.regressor_parameters()

    def discriminator(r):
        model, src, tgt = model_and_batches(r)
        return (lambda: adversarial_loss(model, src, tgt, cfg)[0]), model.discriminator_parameters() + model.encoder[0].parameters()

    def composite(r):
        model, src, tgt = model_and_batches(r)
        return (lambda: total_loss(model, src, tgt, tgt, cfg)), model.parameters()

    def rotation(r):
        model, src, _ = model_and_batches(r)
        return (lambda: self_supervised_batch(model, src, cfg, forced_k=90)), model.regressor_parameters()

    results = {}
    for name, build in (("pose_loss", pose_path), ("regressor", regressor), ("discriminator", discriminator),
                        ("total_loss", composite), ("rotation", rotation)):
        worst = 0.0
        for _ in range(points):
            fn, params = _smooth_point(build, h, rng)
            worst = max(worst, ad.gradient_check(fn, params, h))
        results[name] = worst

    grl_cfg = replace(cfg, optimization="grl", grl_lambda=0.7)
    worst = 0.0
    for _ in range(points):
        def grl(r):
            model, src, tgt = model_and_batches(r, grl_cfg)
            return (lambda: adversarial_loss(model, src, tgt, grl_cfg)[1]), model
        fn, model = _smooth_point(grl, h, rng)
        encoder_params = [p for layer in model.encoder for p in layer.parameters()]
        reversed_ce = lambda: ad.scalar_mul(fn(), -grl_cfg.grl_lambda)
        worst = max(worst, ad.gradient_check(fn, encoder_params, h, numeric_fn=reversed_ce))
        worst = max(worst, ad.gradient_check(fn, model.discriminator_parameters(), h))
    results["gradient_reversal"] = worst
    return results
