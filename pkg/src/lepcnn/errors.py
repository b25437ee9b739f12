"""Exception hierarchy shared across the package."""


class LepError(Exception):
    """Base class for every error raised by lepcnn."""


class DimensionError(LepError, ValueError):
    """Tensor or layer shapes do not agree."""


class ParameterViolation(LepError, ValueError):
    """Fixed-point / security parameters break a required inequality."""


class RangeError(LepError, ValueError):
    """A plaintext value does not fit the gamma-bit budget."""


class KeyReuseError(LepError):
    """A one-time key pair was used a second time."""


class KeyExhausted(LepError):
    """The keystore has no unclaimed key sets left."""


class KeyIntegrityError(LepError):
    """A key file or key batch failed its checksum or is malformed."""


class DuplicateKeyError(LepError):
    """A replenishment batch carries a request id the store already knows."""


class ModelFormatError(LepError):
    """A model file or architecture description cannot be parsed."""


class ProtocolError(LepError):
    """Malformed frame, unexpected message, or an ERROR reply from the peer."""

    def __init__(self, message, code=None):
        super().__init__(message)
        self.code = code


class AuditFailure(LepError):
    """The integrity check caught a wrong element returned by the edge."""

    def __init__(self, layer_index, position, message=None):
        self.layer_index = layer_index
        self.position = position
        super().__init__(message or f"audit failed at layer {layer_index}, output position {position}")
