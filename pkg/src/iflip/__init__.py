"""Instruction-tuned dual-branch face anti-spoofing on a synthetic benchmark."""

__version__ = "0.1.0"

from .config import RunConfig, load_config  # noqa: F401
