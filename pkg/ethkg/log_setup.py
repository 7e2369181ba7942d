import logging
from pathlib import Path
from typing import (
    List,
    Optional,
    Union,
)

from ethkg.errors import InvalidArgumentError


LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(
    level: Union[str, int] = "INFO", log_dir: Optional[Union[str, Path]] = None
) -> logging.Logger:
    """Configure the ethkg logger tree.

    Args:
        level: Logging level name or number
        log_dir: If given, also write ethkg.log inside this directory

    Returns:
        The root ethkg logger
    """
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(str(log_dir / "ethkg.log")))

    logger = logging.getLogger("ethkg")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    for handler in handlers:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            raise InvalidArgumentError("unknown log level")
    logger.setLevel(level)
    logger.propagate = False
    return logger
