class ConfigError(ValueError):
    """Invalid configuration or incompatible inputs to a pipeline stage."""


class TrainingError(RuntimeError):
    """A training step produced a non-finite loss."""
