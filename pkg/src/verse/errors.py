"""Exception types shared across the package."""


class VerseError(Exception):
    """Base class for all package-specific errors."""


class InvalidPoseError(VerseError, ValueError):
    """Rotation not orthonormal / not a proper rotation, or center not finite."""


class InvalidRaymapError(VerseError, ValueError):
    """Raymap violates its invariants (non-unit directions, scattered origins)."""


class DegenerateRaysError(VerseError, ValueError):
    """Ray bundle carries no parallax; intrinsics cannot be recovered."""


class InvalidDepthError(VerseError, ValueError):
    """Depth values outside (0, inf)."""


class InvalidCodeError(VerseError, ValueError):
    """Depth code outside (0, 1]."""


class EmptyInputError(VerseError, ValueError):
    """An operation received an empty sequence where at least one item is required."""


class OrderingError(VerseError, ValueError):
    """Memory append would break strictly-increasing index ordering."""


class ShapeError(VerseError, ValueError):
    """Array shape does not match the declared layout."""


class ConfigError(VerseError, ValueError):
    """Inconsistent or incomplete configuration."""


class VocabularyError(VerseError, ValueError):
    """Caption token outside the fixed template vocabulary."""


class DivergenceError(VerseError, RuntimeError):
    """Sampler produced non-finite values."""

    def __init__(self, message: str, step: int | None = None, window: int | None = None):
        super().__init__(message)
        self.step = step
        self.window = window


class TerminalSessionError(VerseError, RuntimeError):
    """Session was poisoned by an earlier divergence and cannot continue."""


class SessionNotFoundError(VerseError, KeyError):
    """No session with the requested id."""
