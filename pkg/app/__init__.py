import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

from flask import Flask

from config import Config


def create_app(config_class=Config) -> Flask:
    """Create and configure the Flask application."""
    app = Flask(__name__)
    app.config.from_object(config_class)

    # Registration of blueprints.
    from app.cli import bp as cli_bp  # noqa: E402

    app.register_blueprint(cli_bp)

    from app.api import bp as api_bp  # noqa: E402

    app.register_blueprint(api_bp, url_prefix="/api")

    # Logging configuration.
    level = logging.getLevelName(app.config["BBV_LOG_LEVEL"].upper())
    if not isinstance(level, int):
        level = logging.INFO
    if not app.debug and not app.testing:
        if not Path("logs").exists():
            Path("logs").mkdir()

        file_handler = RotatingFileHandler(
            "logs/bbvm.log",
            maxBytes=10240,
            backupCount=10,
        )
        file_handler.setFormatter(
            logging.Formatter(
                "%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]"
            )
        )
        file_handler.setLevel(level)
        app.logger.addHandler(file_handler)

        app.logger.setLevel(level)
        app.logger.info(
            "bbvm startup (maxvers=%s, maxentries=%s)",
            app.config["BBV_MAXVERS"],
            app.config["BBV_MAXENTRIES"],
        )

    return app
