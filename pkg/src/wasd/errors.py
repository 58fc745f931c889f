class WasdError(Exception):
    """Base class for engine errors."""


class InvalidSpecError(WasdError, ValueError):
    pass


class ContextOverflowError(WasdError, ValueError):
    pass


class UnknownNeuronError(WasdError, KeyError):
    pass


class ConflictingInterventionError(WasdError, ValueError):
    pass


class NeighborhoodError(WasdError, ValueError):
    """Empty neighborhood, prompt too short, or enumeration bound exceeded."""


class NoNeutralPrefixError(WasdError):
    """Every neutral prefix changed the model's output."""


class OracleBoundError(WasdError, ValueError):
    pass
