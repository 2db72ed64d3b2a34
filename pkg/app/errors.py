"""Exception hierarchy shared by the perception pipeline.

Messages always name the offending input (file, field or fruit id) so the CLI can
print them verbatim.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional


class PickSightError(Exception):
    """Base class for every error raised by PickSight."""


class ConfigError(PickSightError, ValueError):
    """Invalid configuration document or value."""


class FrameError(PickSightError):
    """Unreadable or ill-formed frame input."""

    def __init__(self, message: str, path: Optional[Path | str] = None):
        self.path = str(path) if path is not None else None
        super().__init__(f"{message} [{self.path}]" if self.path else message)


class NoConsensusError(PickSightError):
    """Hough accumulator holds no votes."""


class DegeneratePointError(PickSightError, ValueError):
    """A surface point coincides with the sphere centre."""


class PoseEstimationError(PickSightError):
    """No usable point was left to estimate a pose from."""


class ContractViolation(PickSightError, ValueError):
    """A public operation was called outside its preconditions."""


class NoVisibilityError(PickSightError):
    """A synthetic fruit has no unoccluded pixel."""


__all__ = [
    "PickSightError",
    "ConfigError",
    "FrameError",
    "NoConsensusError",
    "DegeneratePointError",
    "PoseEstimationError",
    "ContractViolation",
    "NoVisibilityError",
]
