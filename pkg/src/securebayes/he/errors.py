"""Exception hierarchy shared by every HE backend."""


class HeError(Exception):
    """Base class for homomorphic-encryption failures."""


class ParameterError(HeError):
    """Invalid parameter set or prime chain."""


class EncodeError(HeError):
    """Slot values do not fit in the modulus headroom of the target level."""


class HeKeyError(HeError):
    """Missing rotation key or keys belonging to a different parameter set."""


class AlignmentError(HeError):
    """Operands at different levels or scales without an explicit align step."""


class DepthExhaustedError(HeError):
    """No modulus left to consume for a rescale or multiplication."""


class RescaleRequiredError(HeError):
    """A product was used in another multiplication before being rescaled."""

