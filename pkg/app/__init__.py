import copy
import logging
import os

from dotenv import load_dotenv
from flask import Flask


def create_app(config_name: str | None = None) -> Flask:
    """Application factory for the pose-adaptation lab.

    - Loads environment variables from .env
    - Applies environment-based configuration
    - Gives each app its own copy of the config sections
    - Registers the command Blueprints
    """
    load_dotenv()

    from config import SECTIONS, get_config

    env = (config_name or os.getenv("POSEADAPT_ENV") or os.getenv("APP_ENV") or "development").lower()
    config_class = get_config(env)

    app = Flask(__name__)
    app.config.from_object(config_class)
    for name in SECTIONS:
        app.config[name.upper()] = copy.deepcopy(getattr(config_class, name.upper()))

    level = logging.getLevelName(str(app.config.get("LOG_LEVEL", "INFO")).upper())
    app.logger.setLevel(level if isinstance(level, int) else logging.INFO)

    # Register blueprints
    from app.commands.scene_commands import scene_bp
    from app.commands.experiment_commands import experiment_bp
    from app.commands.analysis_commands import analysis_bp

    app.register_blueprint(scene_bp)
    app.register_blueprint(experiment_bp)
    app.register_blueprint(analysis_bp)

    return app
