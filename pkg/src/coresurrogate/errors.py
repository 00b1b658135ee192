"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the domain an operation accepts."""


class InfeasibleEquilibriumError(RuntimeError):
    """No rod position in [0, 1] balances the core at the requested power."""


class ConvergenceError(RuntimeError):
    """An iterative solve did not converge."""


class IntegrationError(RuntimeError):
    """The reference integrator gave up; ``partial`` holds what was computed."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class GenerationError(RuntimeError):
    """A scenario profile could not be generated within the horizon."""


class CorpusError(RuntimeError):
    """Too many scenarios failed while building a corpus."""


class ShapeError(ValueError):
    """Tensor operands have incompatible shapes."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


class NonFiniteError(ArithmeticError):
    """A tensor operation produced NaN or infinity."""


class ModelError(RuntimeError):
    """A surrogate produced an unusable prediction or is missing."""
