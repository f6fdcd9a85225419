from typing import Any, Dict, Optional


class ErrorCode:
    """Structured error codes carried by ToolkitError and mapped to exit codes by the CLI."""
    VALIDATION = "VALIDATION_FAILED"
    CONFIG_INVALID = "CONFIG_INVALID"
    LOAD_FAILED = "LOAD_FAILED"
    IO_FAILED = "IO_FAILED"
    TRAINING_DIVERGED = "TRAINING_DIVERGED"
    OPTIMIZATION_FAILED = "OPTIMIZATION_FAILED"
    UNKNOWN_BACKEND = "UNKNOWN_BACKEND"
    GALLERY_MISSING = "GALLERY_MISSING"
    UNKNOWN = "UNKNOWN_ERROR"

    # Codes the CLI reports with exit status 2
    CONFIG_CODES = frozenset({VALIDATION, CONFIG_INVALID, UNKNOWN_BACKEND})


class ToolkitError(Exception):
    """Toolkit-level error with a structured error code.

    The error_code string is stable and is what callers (and the CLI exit
    status mapping) dispatch on. ``context`` holds ids such as the epoch,
    iteration, class or sample index the failure belongs to.
    """
    def __init__(self, message: str, error_code: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.error_code = error_code
        self.context = dict(context or {})

    def annotate(self, **context: Any) -> "ToolkitError":
        """Return a copy with extra context prepended to the message."""
        merged = {**self.context, **context}
        prefix = ", ".join(f"{k}={v}" for k, v in context.items())
        return ToolkitError(f"[{prefix}] {self}", self.error_code, merged)


def require(condition: bool, message: str, error_code: str = ErrorCode.VALIDATION) -> None:
    """Raise a ToolkitError unless ``condition`` holds."""
    if not condition:
        raise ToolkitError(message, error_code)
