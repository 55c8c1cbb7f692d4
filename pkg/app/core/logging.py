"""Process-wide logging setup shared by the CLI and the HTTP app."""
import logging

from app.core.config import settings

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_configured = False


def configure_logging(level: str | int | None = None) -> None:
    """Install the root handler once; later calls only adjust the level."""
    global _configured
    resolved = level if level is not None else settings.LOG_LEVEL
    if isinstance(resolved, str):
        resolved = resolved.upper()
    if not _configured:
        logging.basicConfig(format=LOG_FORMAT, level=resolved)
        _configured = True
    else:
        logging.getLogger().setLevel(resolved)
