from ._core import *  # noqa: F401,F403
from ._core import LeobedError

__version__ = "0.3.0"


def error_code(err: LeobedError) -> str:
    """Stable code of a LeobedError, e.g. "TraceTooShort"."""
    return err.args[0]
