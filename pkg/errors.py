"""
Exceptions raised by the matcher.

Library code raises these; only the command line front end turns them into
process exit codes (see `cli.main`).
"""


class MatcherError(Exception):
    """Base class for every error the matcher raises on purpose."""
    exit_code = 1


class ConfigError(MatcherError):
    """Invalid or missing configuration value."""
    exit_code = 2


class SceneSpecError(ConfigError):
    """A scene description that cannot be composed (overflow, overlap, unknown object)."""

    def __init__(self, scene, message):
        super().__init__(f"scene '{scene}': {message}")
        self.scene = scene


class DataError(MatcherError):
    """Unreadable, truncated or corrupt data file."""
    exit_code = 3


class CompatibilityError(MatcherError):
    """Descriptor layouts of two artifacts do not match."""
    exit_code = 4


class ShapeError(MatcherError, ValueError):
    """Grid dimensions disagree, or a window falls outside its grid."""


class PoseRangeError(MatcherError, ValueError):
    """Pose outside the supported range, or a transform that collapses the view."""
