"""Exception types raised across the package."""


class PushGridError(Exception):
    """Base class for all pushgrid errors."""


class InvalidInputError(PushGridError, ValueError):
    """Rejected input: non-finite pose, malformed shape, bad file."""


class ScenarioInfeasibleError(PushGridError):
    """Rejection sampling could not produce a valid initial scene."""


class SimulationFault(PushGridError):
    """The simulator produced or received a non-finite state."""


class InvalidActionError(PushGridError, ValueError):
    pass


class ProtocolError(PushGridError):
    """Environment used out of order, e.g. stepped after termination."""


class BatchError(PushGridError, ValueError):
    pass


class CheckpointMismatchError(PushGridError):
    """Checkpoint does not match the requested architecture."""


class TrainingFault(PushGridError):
    """Non-finite loss or parameters during optimisation."""
