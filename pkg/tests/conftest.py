import pytest

from app import create_app
from app.models.apanet import TrainConfig
from app.utils.scene_synth import SceneConfig, generate_scene


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the end-to-end reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def app(tmp_path):
    app = create_app("testing")
    app.config["OUT_DIR"] = str(tmp_path / "runs")
    return app


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def small_scene_config():
    return SceneConfig(seed=3, n_landmarks=40, n_train=24, n_test=8, image_size=8, focal=7.0)


@pytest.fixture
def small_scene(small_scene_config):
    return generate_scene(small_scene_config)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(lr=1e-3, batch_size=4, epochs=1, encoder_hidden=(8, 6), localizer_units=8, head_units=6,
                       discriminator_hidden=(8, 6, 4), seed=1)
