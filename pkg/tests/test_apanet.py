import math
from dataclasses import replace

import numpy as np
import pytest

from app.models.apanet import (
    Batch,
    CheckpointError,
    LabeledSet,
    TrainConfig,
    TrainingData,
    ApanetModel,
    adversarial_loss,
    encode,
    fit,
    gradcheck_suite,
    load_model,
    make_optimizers,
    pose_loss,
    predict,
    predict_batch,
    rotate_batch,
    rotation_class_loss,
    save_model,
    self_supervised_batch,
    source_pose_loss,
    target_pose_loss,
    total_loss,
    train_step,
)
from app.utils import autodiff as ad
from app.utils.autodiff import Tensor
from app.utils.pose_geometry import Pose, Quaternion
from app.utils.rng import substream

SIDE = 4


def random_poses(rng, n):
    return [Pose.from_vector(np.concatenate([rng.normal(size=3), rng.normal(size=4)])) for _ in range(n)]


def make_batch(rng, n, labeled=True):
    images = rng.uniform(size=(n, SIDE, SIDE))
    return Batch(images, random_poses(rng, n) if labeled else None)


@pytest.fixture
def config(tiny_train_config):
    return replace(tiny_train_config, nu=0.5)


@pytest.fixture
def model(config):
    return ApanetModel(SIDE * SIDE, config)


def zero_layer(layer):
    layer.weight.data[:] = 0.0
    layer.bias.data[:] = 0.0


def separable_model(config):
    """Zero image -> zero features, positive image -> positive features; discriminator hidden units start active."""
    m = ApanetModel(SIDE * SIDE, config)
    for layer in m.encoder:
        layer.weight.data[:] = np.abs(layer.weight.data)
        layer.bias.data[:] = 0.0
    for layer in m.discriminator[:-1]:
        layer.weight.data[:] = np.abs(layer.weight.data)
        layer.bias.data[:] = 0.1
    return m


class TestPoseLoss:
    def test_zero_error_at_init(self):
        pred = Tensor([[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]], requires_grad=True)
        loss = pose_loss(pred, Pose.identity(), Tensor(0.0), Tensor(-1.0))
        assert loss.data.tolist() == [-1.0]

    def test_weighted_terms(self):
        pred = Tensor([[2.0, 0.0, 0.0, 0.9, 0.0, 0.0, 0.0]])
        loss = pose_loss(pred, Pose.identity(), Tensor(0.0), Tensor(-1.0))
        assert loss.data[0] == pytest.approx(2.0 + 0.1 * math.e - 1.0, abs=1e-12)
        assert loss.data[0] == pytest.approx(1.27183, abs=1e-5)

    def test_s_t_gradient_at_zero_position_error(self):
        pred = Tensor([[0.0, 0.0, 0.0, 0.5, 0.1, 0.0, 0.0]])
        s_t, s_q = Tensor(0.0, requires_grad=True), Tensor(-1.0, requires_grad=True)
        ad.backward(ad.total(pose_loss(pred, Pose.identity(), s_t, s_q)))
        assert float(s_t.grad) == 1.0

    def test_target_sign_is_canonical(self):
        pred = Tensor([[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]])
        flipped = Pose((0.0, 0.0, 0.0), Quaternion(-1.0, 0.0, 0.0, 0.0))
        loss = pose_loss(pred, [flipped], Tensor(0.0), Tensor(-1.0))
        assert loss.data.tolist() == [-1.0]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pose_loss(Tensor(np.zeros((2, 7))), [Pose.identity()], Tensor(0.0), Tensor(-1.0))


class TestBatchLosses:
    def test_source_loss_matches_per_sample_oracle(self, model):
        rng = np.random.default_rng(0)
        batch = make_batch(rng, 5)
        pred = model.forward(batch.images).data
        truth = batch.target_array()
        s_t, s_q = model.s_t.item(), model.s_q.item()
        per_sample = [
            np.abs(p[:3] - t[:3]).sum() * math.exp(-s_t) + s_t + np.abs(p[3:] - t[3:]).sum() * math.exp(-s_q) + s_q
            for p, t in zip(pred, truth)
        ]
        assert source_pose_loss(model, batch).item() == pytest.approx(np.mean(per_sample), abs=1e-12)

    def test_sum_convention_is_additive(self, model):
        rng = np.random.default_rng(1)
        single = make_batch(rng, 1)
        doubled = Batch(np.concatenate([single.images, single.images]), single.targets * 2)
        assert source_pose_loss(model, doubled, "sum").item() == pytest.approx(
            2.0 * source_pose_loss(model, single, "sum").item(), abs=1e-12)

    def test_target_loss_is_zero_without_labels(self, model, config):
        batch = make_batch(np.random.default_rng(2), 3)
        assert target_pose_loss(model, batch, replace(config, nu=0.0)).item() == 0.0
        assert target_pose_loss(model, None, config).item() == 0.0

    def test_uniform_discriminator_gives_ln2(self, model, config):
        rng = np.random.default_rng(3)
        zero_layer(model.discriminator[-1])
        disc_loss, confusion = adversarial_loss(model, make_batch(rng, 3), make_batch(rng, 2, labeled=False), config)
        assert disc_loss.item() == pytest.approx(math.log(2.0), abs=1e-12)
        assert confusion.item() == -disc_loss.item()

    def test_total_loss_is_affine_in_alpha(self, model, config):
        rng = np.random.default_rng(4)
        source, target, labeled = make_batch(rng, 4), make_batch(rng, 4, labeled=False), make_batch(rng, 2)
        values = {a: total_loss(model, source, target, labeled, replace(config, alpha=a)).item() for a in (0.0, 1.0, 2.0)}
        assert values[2.0] - values[0.0] == pytest.approx(2.0 * (values[1.0] - values[0.0]), abs=1e-12)
        pose_only = source_pose_loss(model, source).item() + target_pose_loss(model, labeled, config).item()
        assert values[0.0] == pytest.approx(pose_only, abs=1e-12)

    def test_zero_lambda_blocks_encoder_gradient(self, model, config):
        rng = np.random.default_rng(5)
        grl = replace(config, optimization="grl", grl_lambda=0.0)
        _, confusion = adversarial_loss(model, make_batch(rng, 3), make_batch(rng, 3, labeled=False), grl)
        ad.backward(confusion)
        for layer in model.encoder:
            for p in layer.parameters():
                assert p.grad is None or not np.any(p.grad)
        assert any(p.grad is not None and np.any(p.grad) for p in model.discriminator_parameters())


class TestTraining:
    def test_step_is_deterministic(self, config):
        rng = np.random.default_rng(6)
        source, target, labeled = make_batch(rng, 4), make_batch(rng, 4, labeled=False), make_batch(rng, 4)
        prints = []
        for _ in range(2):
            m = ApanetModel(SIDE * SIDE, config)
            train_step(m, source, target, labeled, config, make_optimizers(m, config))
            prints.append(m.fingerprint())
        assert prints[0] == prints[1]
        assert m.step == 1

    def test_alpha_zero_ignores_target_images(self, config):
        cfg = replace(config, alpha=0.0)
        rng = np.random.default_rng(7)
        source, labeled = make_batch(rng, 4), make_batch(rng, 4)
        prints = []
        for target in (make_batch(rng, 4, labeled=False), make_batch(rng, 4, labeled=False)):
            m = ApanetModel(SIDE * SIDE, cfg)
            train_step(m, source, target, labeled, cfg, make_optimizers(m, cfg), phases=("regressor",))
            prints.append(m.fingerprint(m.regressor_parameters()))
        assert prints[0] == prints[1]

    def test_discriminator_phase_separates_scenes(self, config):
        cfg = replace(config, dropout=0.0, lr=1e-2)
        m = separable_model(cfg)
        source = Batch(np.zeros((4, SIDE, SIDE)), random_poses(np.random.default_rng(8), 4))
        target = Batch(np.ones((4, SIDE, SIDE)))
        # source features are all zero, target features strictly positive
        assert not np.any(encode(m, source.images))
        assert np.all(encode(m, target.images) > 0)
        before = m.fingerprint(m.regressor_parameters())
        optimizers = make_optimizers(m, cfg)
        for _ in range(300):
            report = train_step(m, source, target, None, cfg, optimizers, phases=("discriminator",))
        assert report.disc_accuracy == 1.0
        assert m.fingerprint(m.regressor_parameters()) == before

    def test_regressor_phase_leaves_discriminator(self, config):
        cfg = replace(config, alpha=1.0)
        rng = np.random.default_rng(15)
        m = ApanetModel(SIDE * SIDE, cfg)
        before = m.fingerprint(m.discriminator_parameters())
        regressor_before = m.fingerprint(m.regressor_parameters())
        optimizers = make_optimizers(m, cfg)
        for _ in range(3):
            train_step(m, make_batch(rng, 4), make_batch(rng, 4, labeled=False), make_batch(rng, 2), cfg, optimizers,
                       phases=("regressor",))
        assert m.fingerprint(m.discriminator_parameters()) == before
        assert m.fingerprint(m.regressor_parameters()) != regressor_before

    def test_grl_step_runs(self, config):
        cfg = replace(config, optimization="grl")
        rng = np.random.default_rng(9)
        m = ApanetModel(SIDE * SIDE, cfg)
        before = m.fingerprint()
        report = train_step(m, make_batch(rng, 4), make_batch(rng, 4, labeled=False), make_batch(rng, 2), cfg,
                            make_optimizers(m, cfg))
        assert math.isfinite(report.total)
        assert m.fingerprint() != before

    def test_fit_history(self, config):
        rng = np.random.default_rng(10)
        cfg = replace(config, epochs=3)
        source = LabeledSet(rng.uniform(size=(8, SIDE, SIDE)), random_poses(rng, 8))
        labeled = LabeledSet(rng.uniform(size=(2, SIDE, SIDE)), random_poses(rng, 2))
        m = ApanetModel(SIDE * SIDE, cfg)
        history = fit(m, TrainingData([source], rng.uniform(size=(6, SIDE, SIDE)), labeled), cfg)
        assert len(history.epochs) == 3
        assert all(math.isfinite(v) for v in history.curve("source_loss"))
        assert m.step == 3 * 2

    def test_fit_needs_sources(self, model, config):
        with pytest.raises(ValueError):
            fit(model, TrainingData([], np.zeros((2, SIDE, SIDE))), config)


class TestSelfSupervision:
    def test_forced_zero_rotation_is_plain_loss(self, model, config):
        batch = make_batch(np.random.default_rng(11), 4)
        assert self_supervised_batch(model, batch, config, forced_k=0).item() == source_pose_loss(model, batch).item()

    def test_rotation_keeps_positions(self):
        rng = np.random.default_rng(12)
        batch = make_batch(rng, 6)
        rotated = rotate_batch(batch, rng, prob=1.0)
        assert [p.t for p in rotated.targets] == [p.t for p in batch.targets]
        forced = rotate_batch(batch, rng, prob=0.0, forced_k=90)
        assert forced.rotations.tolist() == [1] * 6
        assert np.array_equal(forced.images[0], np.rot90(batch.images[0], -1))

    def test_half_of_the_samples_are_rotated(self):
        batch = rotate_batch(Batch(np.zeros((20000, SIDE, SIDE))), substream(0, "rotation-mix"), prob=0.5)
        classes = batch.rotations
        assert abs(np.mean(classes != 0) - 0.5) < 0.02
        counts = np.bincount(classes[classes != 0], minlength=4)[1:]
        assert np.all(np.abs(counts / counts.sum() - 1.0 / 3.0) < 0.02)

    def test_untrained_rotation_head_gives_ln4(self, config):
        m = ApanetModel(SIDE * SIDE, replace(config, rotation_class_head=True))
        zero_layer(m.rotation_head)
        batch = rotate_batch(make_batch(np.random.default_rng(13), 4), np.random.default_rng(0), prob=0.5)
        assert rotation_class_loss(m, batch).item() == pytest.approx(math.log(4.0), abs=1e-12)


class TestInference:
    def test_predict_is_deterministic_and_normalized(self, model):
        image = np.random.default_rng(14).uniform(size=(SIDE, SIDE))
        a, b = predict(model, image), predict(model, image)
        assert a == b
        assert a.q.norm() == pytest.approx(1.0, abs=1e-12)
        assert a.q.w >= 0.0


class TestCheckpoints:
    def test_roundtrip_is_bit_identical(self, model, tmp_path):
        path = str(tmp_path / "model.apanet")
        model.step = 17
        save_model(model, path)
        loaded = load_model(path)
        probes = np.random.default_rng(15).uniform(size=(100, SIDE, SIDE))
        assert np.array_equal(model.forward(probes).data, loaded.forward(probes).data)
        assert loaded.fingerprint() == model.fingerprint()
        assert loaded.step == 17
        assert predict_batch(loaded, probes[:3]) == predict_batch(model, probes[:3])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.apanet"
        path.write_bytes(b"NOTAMODEL\n{}\n")
        with pytest.raises(CheckpointError, match="APANET1"):
            load_model(str(path))

    def test_future_version(self, model, tmp_path):
        path = tmp_path / "future.apanet"
        save_model(model, str(path))
        data = path.read_bytes()
        path.write_bytes(data.replace(b"APANET1\n", b"APANET2\n", 1))
        with pytest.raises(CheckpointError, match="unsupported version"):
            load_model(str(path))

    def test_truncated_and_trailing(self, model, tmp_path):
        path = tmp_path / "m.apanet"
        save_model(model, str(path))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_model(str(path))
        path.write_bytes(data + b"\0" * 8)
        with pytest.raises(CheckpointError, match="trailing"):
            load_model(str(path))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(nu=1.5)
        with pytest.raises(ValueError):
            TrainConfig(mode="pixels")
        with pytest.raises(ValueError):
            TrainConfig(optimization="sgd")

    def test_from_section_ignores_unknown_keys(self):
        cfg = TrainConfig.from_section({"lr": 0.5, "unrelated": 1}, seed=3)
        assert cfg.lr == 0.5 and cfg.seed == 3


class TestGradients:
    def test_every_loss_path(self):
        results = gradcheck_suite(seed=0, points=2)
        assert set(results) == {"pose_loss", "regressor", "discriminator", "total_loss", "rotation", "gradient_reversal"}
        for name, error in results.items():
            assert error < 1e-5, name

    @pytest.mark.slow
    def test_full_suite(self):
        assert max(gradcheck_suite(seed=1, points=20).values()) < 1e-5
