"""Exception types raised across the package."""


class ClapAugError(Exception):
    """Base class for all package errors."""


class ShapeError(ClapAugError, ValueError):
    pass


class NonFiniteError(ClapAugError, ValueError):
    pass


class StateError(ClapAugError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class TokenizeError(ClapAugError, ValueError):
    pass


class CheckpointError(ClapAugError):
    pass


class ManifestError(ClapAugError, ValueError):
    pass


class ConfigError(ClapAugError, ValueError):
    pass


class GenerationError(ClapAugError):
    """LLM or fallback generation could not produce valid output."""


class EndpointError(GenerationError):
    """The chat-completion endpoint failed after all retries."""


class DegenerateError(ClapAugError, ValueError):
    """A vector that must be normalized has (near-)zero norm."""
