import logging
from pathlib import Path

from app.shared.config import Settings

LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"


def configure_logging(settings: Settings) -> None:
    """Console logging plus a file handler that scripts/tail_logs.sh follows"""
    handlers: list = [logging.StreamHandler()]
    if settings.effective_log_dir:
        log_dir = Path(settings.effective_log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / settings.log_file, encoding="utf-8"))

    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
