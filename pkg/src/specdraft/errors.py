"""Exception types raised by specdraft."""


class SpecDraftError(Exception):
    """Base class for all specdraft errors."""


class InvalidInputError(SpecDraftError, ValueError):
    """Token ids, distributions or shapes that do not fit the model."""


class InvalidArgumentError(SpecDraftError, ValueError):
    pass


class InvalidConfigError(SpecDraftError, ValueError):
    """A tree config, strategy or generation config that cannot be run."""


class InvalidStateError(SpecDraftError, RuntimeError):
    pass


class ModelFormatError(SpecDraftError, ValueError):
    """A model file that fails to parse or violates a model invariant."""
