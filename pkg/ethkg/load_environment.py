import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv


# Registry of environment variables ethkg reads, with descriptions and defaults
ENV_REGISTRY = {
    "ETH_DATA_DIR": {
        "description": "Root directory used to resolve relative dataset paths",
        "default": "",
    },
    "ETH_LOG_LEVEL": {
        "description": "Logging level configuration",
        "default": "INFO",
    },
    "ETH_NUM_WORKERS": {
        "description": "Threads used to score evaluation snapshots concurrently",
        "default": "0",
    },
}


def load_environment(env_path: Optional[str] = None) -> bool:
    """Load variables from a .env file if one exists; existing values win."""
    path = Path(env_path) if env_path else Path.cwd() / ".env"
    if not path.exists():
        return False
    return bool(load_dotenv(path, override=False))


def get_env(var_name: str) -> str:
    """Read a registered variable, falling back to its documented default."""
    return os.getenv(var_name) or ENV_REGISTRY[var_name]["default"]


def resolve_data_path(path: str) -> Path:
    """Resolve a dataset path, trying ETH_DATA_DIR for relative paths."""
    candidate = Path(path).expanduser()
    if candidate.is_absolute() or candidate.exists():
        return candidate
    root = get_env("ETH_DATA_DIR")
    if root:
        return Path(root).expanduser() / candidate
    return candidate
