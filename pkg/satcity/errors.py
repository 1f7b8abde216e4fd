"""Exception hierarchy. Every error knows the CLI exit code it maps to."""


class SatCityError(Exception):
    exit_code = 1


class InputError(SatCityError):
    """Bad or unreadable input data."""
    exit_code = 2


class EmptyInputError(InputError):
    pass


class NonFiniteError(InputError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"non-finite coordinate at point {index}")


class PlyHeaderError(InputError):
    """Malformed PLY header."""


class PlyFormatError(InputError):
    """Unsupported PLY magic or storage format."""


class PlyTruncatedError(InputError):
    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated PLY body: header declares {expected} vertices, body holds {actual}")


class ObjFormatError(InputError):
    pass


class FieldDomainError(InputError):
    """Query outside the normalized [-1, 1] domain."""


class CheckpointError(InputError):
    pass


class CameraFileError(InputError):
    pass


class SceneFileError(InputError):
    pass


class ConfigError(InputError):
    pass


class AtlasOverflowError(InputError):
    pass


class FitDivergedError(SatCityError):
    exit_code = 3

    def __init__(self, step, losses):
        self.step = step
        self.losses = losses
        super().__init__(f"total loss became non-finite at step {step}: {losses}")


class EnhancerError(SatCityError):
    exit_code = 4

    def __init__(self, message, view_index=None):
        self.view_index = view_index
        if view_index is not None:
            message = f"view {view_index}: {message}"
        super().__init__(message)


class RefineAbortedError(EnhancerError):
    def __init__(self, iteration, cause, last_good):
        self.iteration = iteration
        self.last_good = last_good
        self.cause = cause
        super().__init__(f"refine iteration {iteration} aborted: {cause}")
        self.view_index = cause.view_index
