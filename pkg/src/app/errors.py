"""Module for defining custom exceptions used across the parameter estimation pipeline."""

class PhysParamError(Exception):
    """Base class for exceptions in the physical parameter estimation package."""
    def __init__(self, message: str, details: str | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.details = details

class ConfigurationError(PhysParamError):
    """Exception raised for malformed run configs, presets or overrides."""

class FamilyMismatchError(ConfigurationError):
    """Exception raised when a dataset, truth file or checkpoint disagrees on the dynamics family."""

class ScenarioError(ConfigurationError):
    """Exception raised for degenerate synthetic scenarios."""

class DatasetError(PhysParamError):
    """Exception raised when a dataset directory is missing pieces or is inconsistent."""

class ImageNotFoundError(DatasetError):
    """Exception raised when an image file is not found."""
    def __init__(self, path: str) -> None:
        super().__init__(f"Image not found: {path}", details=path)

class InvalidImageError(DatasetError):
    """Exception raised when an image file is invalid or cannot be opened."""

class CheckpointError(DatasetError):
    """Exception raised when a checkpoint cannot be read or is incomplete."""

class InitializationError(DatasetError):
    """Exception raised when masks do not allow a parameter estimate."""

class NumericalError(PhysParamError):
    """Exception raised for numerical failures during simulation or optimization."""

class NonFiniteError(NumericalError):
    """Exception raised when a loss, gradient or function value is not finite."""

class IntegrationError(NumericalError):
    """Exception raised when the ODE state becomes non-finite."""
    def __init__(self, message: str, time: float, details: str | None = None) -> None:
        super().__init__(message, details=details)
        self.time = time

class SpringSingularityError(NumericalError):
    """Exception raised when the two spring masses coincide."""

class HomographyError(NumericalError):
    """Exception raised when a homography maps a point to the plane at infinity."""

class AutodiffError(PhysParamError):
    """Base class for errors raised by the differentiation tape."""

class ShapeMismatchError(AutodiffError):
    """Exception raised when operand shapes are invalid for an operation."""

class DomainError(AutodiffError):
    """Exception raised when an input lies outside an operation's domain."""

class TapeError(AutodiffError):
    """Exception raised for tape misuse (foreign tensors, repeated backward, unknown ops)."""
