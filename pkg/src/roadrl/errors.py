"""Exception types shared across the package."""


class RoadRlError(Exception):
    """Base class for all package errors."""


class DegenerateInput(RoadRlError):
    """Input data is too degenerate to fit or interpolate."""


class OffCorridor(RoadRlError):
    """Point lies farther from the road curve than the allowed corridor."""


class DegenerateTrajectory(RoadRlError):
    """Trajectory too short for the requested cost term."""


class EpisodeFinished(RoadRlError):
    """step() was called on an environment whose episode already ended."""


class NoPathException(RoadRlError):
    """The feasible set is empty; caller must fall back to an emergency stop."""


class EmptyFeasibleSet(RoadRlError):
    """Projection was requested onto an empty feasible set."""


class LengthMismatch(RoadRlError):
    """Sequence arguments have inconsistent lengths."""


class ShapeMismatch(RoadRlError):
    """Array argument has the wrong shape for the network."""


class NonFiniteLoss(RoadRlError):
    """A NaN or infinity appeared in the training loss."""


class ConfigError(RoadRlError):
    """A run-configuration file failed to parse or validate."""
