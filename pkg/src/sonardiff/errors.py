"""Exception types shared across the package."""


class SonarDiffError(Exception):
    """Base class for all package errors."""


class ParameterError(SonarDiffError, ValueError):
    """An argument is outside its allowed range."""


class ShapeError(SonarDiffError, ValueError):
    """Array shapes are inconsistent."""


class ConfigurationError(SonarDiffError):
    """A component is configured in a way that cannot run."""


class InjectionError(SonarDiffError):
    """Attention injection is missing a captured trace entry."""

    def __init__(self, layer_id, timestep, what="trace entry"):
        self.layer_id = layer_id
        self.timestep = timestep
        super().__init__(f"missing {what} for layer {layer_id!r} at timestep {timestep}")


class IngestionError(SonarDiffError):
    """A manifest or its referenced files failed validation."""

    def __init__(self, message, offending=()):
        self.offending = list(offending)
        if self.offending:
            message = f"{message}: {', '.join(map(str, self.offending))}"
        super().__init__(message)


class StratificationError(ParameterError):
    """A class is too small to be split into the requested parts."""


class TemplateError(SonarDiffError, KeyError):
    """A prompt template slot was left unbound."""

    def __init__(self, slot):
        self.slot = slot
        super().__init__(f"unbound template slot {slot!r}")

    def __str__(self):
        return self.args[0]


class GatewayError(SonarDiffError):
    """The caption/prompt service failed after all retries."""


class ValidationError(SonarDiffError, ValueError):
    """Input data violates a documented contract."""


class NumericalError(SonarDiffError, ArithmeticError):
    """A numerical routine produced values outside tolerance."""


class MergeError(ConfigurationError):
    """An adapter merge would be applied twice or does not fit."""
