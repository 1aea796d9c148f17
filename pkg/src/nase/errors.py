"""Exception hierarchy shared by every module."""


class NaseError(Exception):
    """Base class; ``category`` drives CLI exit reporting."""

    category = "Runtime"


class ConfigError(NaseError, ValueError):
    category = "Config"


class FormatError(NaseError, ValueError):
    category = "Io"


class UnsupportedError(NaseError, ValueError):
    category = "Io"


class IoError(NaseError, OSError):
    category = "Io"


class ShapeError(NaseError, ValueError):
    category = "Config"


class DegenerateSignalError(NaseError, ValueError):
    pass


class DomainError(NaseError, ValueError):
    pass


class TrainingError(NaseError, RuntimeError):
    category = "Training"


class StateError(NaseError, RuntimeError):
    category = "State"


class InvalidKeyError(NaseError, ValueError, KeyError):
    """Bad AES key or nonce length."""

    category = "Config"

    def __str__(self):
        return Exception.__str__(self)


class AuthError(NaseError):
    """Ciphertext failed authentication; no plaintext is released."""

    category = "State"
