"""Exception family for the simulator.

Every error subclasses a built-in so callers can catch ``ValueError`` or
``RuntimeError`` without importing this module.
"""


class FixedPointOverflowError(OverflowError):
    """A value or product left the representable fixed-point range."""


class LengthMismatchError(ValueError):
    pass


class UnknownPartySetError(ValueError):
    pass


class OwnershipError(ValueError):
    pass


class InvalidatedShareError(ValueError):
    """Shares consumed by a reshare were used again."""


class DealerExhaustedError(RuntimeError):
    pass


class ShapeMismatchError(ValueError):
    pass


class IdxFormatError(ValueError):
    pass


class DataPlaneError(ValueError):
    pass


class AttackSetupError(ValueError):
    pass


class AggregationError(ValueError):
    pass


class TopologyError(ValueError):
    pass


class ScenarioError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration. ``key`` names the offending config key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
