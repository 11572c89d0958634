"""Built-in task plugins and the narrow interfaces workers call them through."""

from __future__ import annotations

from typing import Callable

# Returns True once the server has flagged the job for cancellation.
CancelProbe = Callable[[], bool]

# Receives plugin diagnostics; the worker streams them as contiguous chunks.
LogFn = Callable[[str], None]


class TaskCancelled(Exception):
    """Raised inside a plugin when the cancel probe fires."""


class PluginInputError(ValueError):
    """Malformed task input; the job fails without retry semantics changing."""
