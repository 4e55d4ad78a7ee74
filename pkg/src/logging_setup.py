"""
Logging and environment setup shared by the CLI and the Gradio app.

Settings are read from the environment, optionally seeded from a .env file.
"""

import logging
import os

import torch
from dotenv import load_dotenv

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def load_environment() -> None:
    """Load a .env file if one exists; real environment variables win."""
    load_dotenv(override=False)
    threads = os.environ.get("DEFLETTER_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))


def configure_logging(level: str | None = None) -> None:
    level = (level or os.environ.get("DEFLETTER_LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger()
    root.handlers.clear()
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def progress_enabled(progress: bool | None = None) -> bool:
    """tqdm bars are on unless the caller or DEFLETTER_PROGRESS=0 turns them off."""
    if progress is not None:
        return progress
    return os.environ.get("DEFLETTER_PROGRESS", "1") != "0"


def default_device() -> torch.device:
    return torch.device(os.environ.get("DEFLETTER_DEVICE", "cpu"))
