class DetectorError(Exception):
    """Base class for every error raised by tiny_nodule_detector."""

    def __init__(self, message="The detector pipeline failed"):
        self.message = message
        super().__init__(self.message)


class ShapeMismatchError(DetectorError, ValueError):
    """Used when tensor shapes are incompatible for an operation."""

    def __init__(self, message="Tensor shapes are incompatible"):
        super().__init__(message)


class NonFiniteError(DetectorError, ValueError):
    """Used when NaN or infinite values reach an operation that cannot accept them."""

    def __init__(self, message="Encountered a non-finite value"):
        super().__init__(message)


class GradcheckError(DetectorError):
    """Used when a finite-difference gradient check cannot be evaluated."""

    def __init__(self, message="Gradient check could not be evaluated"):
        super().__init__(message)


class CheckpointFormatError(DetectorError):
    """Used when a checkpoint container is malformed or does not match the model."""

    def __init__(self, message="Checkpoint file is malformed"):
        super().__init__(message)


class ConfigError(DetectorError):
    """Used when a configuration file, profile or flag value is invalid."""

    def __init__(self, message="Invalid configuration"):
        super().__init__(message)


class LabelParseError(DetectorError):
    """Used when a label file cannot be parsed. Carries the offending line number."""

    def __init__(self, message="Label file cannot be parsed", line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ImageFormatError(DetectorError):
    """Used when a raw or PGM image file is malformed. Carries the byte offset when known."""

    def __init__(self, message="Image file is malformed", offset=None):
        self.offset = offset
        if offset is not None:
            message = f"offset {offset}: {message}"
        super().__init__(message)


class SceneGenerationError(DetectorError):
    """Used when nodules cannot be placed in a synthetic scene within the retry budget."""

    def __init__(self, message="Could not place every nodule in the scene"):
        super().__init__(message)


class EmptyMaskError(DetectorError):
    """Used when lung masking finds no lung-like region."""

    def __init__(self, message="No lung-like region found in the image"):
        super().__init__(message)


class EncodeError(DetectorError, ValueError):
    """Used when a box cannot be expressed in a head's box parameterization."""

    def __init__(self, message="Box cannot be encoded for this anchor and cell"):
        super().__init__(message)


class TrainingDivergedError(DetectorError):
    """Used when the training loss becomes non-finite."""

    def __init__(self, message="Training loss became non-finite"):
        super().__init__(message)


VALIDATION_ERRORS = (ConfigError, LabelParseError, ImageFormatError)
