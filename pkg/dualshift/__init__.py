"""Dual-branch shift-label unlearnable dataset generation and evaluation."""

import logging

from .config import VERSION
from .errors import ErrorCode, ToolkitError

LOG = logging.getLogger(__name__)

__version__ = VERSION

__all__ = ["ErrorCode", "ToolkitError", "__version__"]
