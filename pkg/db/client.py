import os
from pathlib import Path

from dotenv import load_dotenv

# Optional for local runs; CI and the service may export the variables directly
if os.path.exists('.env'):
    load_dotenv()

DEFAULT_ARTIFACTS_DIR = "artifacts"


def get_artifacts_root() -> Path:
    return Path(os.environ.get("HYFL_ARTIFACTS_DIR") or DEFAULT_ARTIFACTS_DIR)


def get_mnist_dir() -> str:
    """Directory with the four MNIST IDX files, or '' when not configured."""
    return os.environ.get("HYFL_MNIST_DIR", "")


def get_log_level() -> str:
    return os.environ.get("HYFL_LOG_LEVEL", "INFO").upper()
