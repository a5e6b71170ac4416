import json
import logging
import sys
import time
from contextlib import contextmanager
from typing import Callable, Iterator, TextIO

from pydantic import ValidationError

from advknn.core.exceptions import AdvKnnError

logger = logging.getLogger(__name__)


@contextmanager
def log_duration(command: str) -> Iterator[None]:
    start_time = time.time()
    status = "error"
    try:
        yield
        status = "ok"
    finally:
        process_time = time.time() - start_time
        logger.info(f"{command} Status: {status} Duration: {process_time:.3f}s")


def error_payload(exc: BaseException) -> dict:
    """Machine-readable description of a failure."""
    if isinstance(exc, AdvKnnError):
        payload = {"error": type(exc).__name__, "code": exc.code, "message": str(exc)}
        payload.update(exc.details())
        return payload
    if isinstance(exc, ValidationError):
        first = exc.errors()[0]
        return {"error": "ValidationError", "code": "validation_error",
                "message": f"{'.'.join(str(p) for p in first['loc'])}: {first['msg']}"}
    return {"error": type(exc).__name__, "code": "internal_error", "message": str(exc)}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, AdvKnnError):
        return exc.exit_code
    if isinstance(exc, ValidationError):
        return 2
    return 1


def run_command(command: str, handler: Callable[[], None], stream: TextIO = None) -> int:
    """Run one CLI command, turning any failure into a single ``error: {...}`` line and an exit code."""
    stream = stream or sys.stderr
    try:
        with log_duration(command):
            handler()
        return 0
    except Exception as exc:
        logger.error(f"Unhandled exception in {command}: {exc}", exc_info=not isinstance(exc, AdvKnnError))
        stream.write(f"error: {json.dumps(error_payload(exc), default=str)}\n")
        stream.flush()
        return exit_code_for(exc)
