"""Exceptions shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class InvalidSize(ValueError):
    """Maze width is not an odd integer in the supported range."""


class EpisodeFinished(RuntimeError):
    """step() was called on an environment whose episode already ended."""


class InvalidBatch(ValueError):
    """A loss was asked to reduce over an empty batch or rollout."""
