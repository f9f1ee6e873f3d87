"""Exception types shared across the package."""


class CamreidError(Exception):
    """Base class for package-specific failures."""


class InvalidInputError(CamreidError, ValueError):
    """An argument violates a documented precondition (shape, range, finiteness)."""


class DegenerateInputError(CamreidError, ValueError):
    """Input is structurally valid but numerically unusable (zero vector, empty set)."""


class TrainingDivergenceError(CamreidError, RuntimeError):
    """A training step produced non-finite losses or gradients."""


class ManifestError(CamreidError, RuntimeError):
    """A persisted artifact is missing, corrupt, or fails digest validation."""
