class ConfigError(ValueError):
    """Invalid configuration: bad key, bad value, or inconsistent settings."""


class SegShapeError(ValueError):
    """Tensor or array with the wrong shape."""


class InputError(ValueError):
    """Rejected user input (empty prompt, non-binary mask, unreadable file)."""


class StateError(RuntimeError):
    """Operation attempted on an object in the wrong state."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss, failed checkpoint write)."""
