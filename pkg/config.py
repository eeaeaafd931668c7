import os
from typing import Any, Dict, Iterable, List, Tuple

from dotenv import dotenv_values


SECTIONS = ("scene", "task", "train", "analysis", "probe")


class BaseConfig:
    LOG_LEVEL = os.getenv("POSEADAPT_LOG_LEVEL", "INFO")
    OUT_DIR = os.getenv("POSEADAPT_OUT_DIR", "runs")

    # Synthetic scene capture (one entry per generated scene, centers come from TASK)
    SCENE = {
        "n_landmarks": 60,
        "n_train": 500,
        "n_test": 100,
        "pose_extent": (4.0, 4.0, 1.0),
        "landmark_offset": (-20.0, 0.0, 0.0),
        "landmark_extent": (8.0, 12.0, 5.0),
        "orientation_spread": 10.0,
        "image_size": 16,
        "focal": 14.0,
        "splat_sigma": 0.8,
        "jitter": False,
    }

    # Adaptation task: where the scenes live and how the target is supplemented
    TASK = {
        "source_centers": ((0.0, 0.0, 0.0),),
        "target_center": (100.0, 0.0, 0.0),
        "mode": "ape",
        "anchor_stride": 10,
        "seed": int(os.getenv("POSEADAPT_SEED", "0")),
        "seeds": 5,
    }

    # Training hyper-parameters; defaults are the published ones
    TRAIN = {
        "lr": 1e-5,
        "nu": 0.05,
        "batch_size": 16,
        "alpha": 1.0,
        "epochs": 200,
        "optimization": "alternating",
        "grl_lambda": 1.0,
        "encoder_hidden": (256, 128),
        "localizer_units": 1024,
        "head_units": 256,
        "discriminator_hidden": (1024, 256, 64),
        "dropout": 0.5,
        "s_t_init": 0.0,
        "s_q_init": -1.0,
        "rotation_class_head": False,
        "rotation_prob": 0.5,
        "early_stop": False,
        "early_stop_window": 10,
        "early_stop_tol": 1e-4,
    }

    ANALYSIS = {
        "anchor_stride": 10,
        "rho": 1.0,
        "tau": 0.0,
        "strict": True,
    }

    # Adaptability probe; a threshold of 0 means "2 x single-scene supervised error"
    PROBE = {
        "threshold_factor": 2.0,
        "source_threshold_m": 0.0,
        "target_threshold_m": 0.0,
        "source_threshold_deg": 0.0,
        "target_threshold_deg": 0.0,
    }


class DevelopmentConfig(BaseConfig):
    DEBUG = True


class TestingConfig(BaseConfig):
    TESTING = True
    LOG_LEVEL = "WARNING"
    SCENE = dict(BaseConfig.SCENE, n_landmarks=40, n_train=48, n_test=16)
    TASK = dict(BaseConfig.TASK, seeds=1, seed=0)
    TRAIN = dict(
        BaseConfig.TRAIN,
        lr=1e-3,
        epochs=2,
        encoder_hidden=(32, 16),
        localizer_units=32,
        head_units=16,
        discriminator_hidden=(32, 16, 8),
    )


class ProductionConfig(BaseConfig):
    DEBUG = False


config_by_name = {
    "development": DevelopmentConfig,
    "testing": TestingConfig,
    "production": ProductionConfig,
}


def get_config(env_name: str):
    """Return config class based on env name; default to development."""
    return config_by_name.get(env_name.lower(), DevelopmentConfig)


# Section helpers

def _parse_like(default: Any, raw: str) -> Any:
    raw = raw.strip()
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return tuple(
                tuple(float(v) for v in chunk.split(","))
                for chunk in raw.split(";") if chunk.strip()
            )
        cast = int if default and all(isinstance(v, int) for v in default) else float
        return tuple(cast(v) for v in raw.split(",") if v.strip())
    return raw


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(format_value(v) for v in value)
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_option(config, dotted_key: str, raw: str) -> None:
    """Apply one ``section.key=value`` override to a Flask config mapping."""
    section, _, key = dotted_key.strip().partition(".")
    section = section.lower()
    if section not in SECTIONS or not key:
        raise ValueError(f"unknown config section in {dotted_key!r}")
    values = config[section.upper()]
    if key not in values:
        raise ValueError(f"unknown config key {dotted_key!r}")
    try:
        values[key] = _parse_like(values[key], raw)
    except ValueError as e:
        raise ValueError(f"bad value for {dotted_key}: {e}") from e


def parse_assignment(text: str) -> Tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise ValueError(f"expected section.key=value, got {text!r}")
    return key, value


def load_config_file(config, path: str) -> None:
    """Read a dotenv-style file of dotted keys into the config sections."""
    if not os.path.exists(path):
        raise ValueError(f"config file not found: {path}")
    for key, value in dotenv_values(path).items():
        set_option(config, key, value or "")


def apply_overrides(config, assignments: Iterable[str]) -> None:
    for text in assignments:
        key, value = parse_assignment(text)
        set_option(config, key, value)


def resolved_items(config) -> List[Tuple[str, str]]:
    items = []
    for section in SECTIONS:
        for key, value in config[section.upper()].items():
            items.append((f"{section}.{key}", format_value(value)))
    return items


def snapshot_text(config) -> str:
    return "".join(f"{k}={v}\n" for k, v in resolved_items(config))


def section(config, name: str) -> Dict[str, Any]:
    return dict(config[name.upper()])
