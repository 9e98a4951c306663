"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Bad config value, unknown target name, backend mismatch."""


class DegenerateInputError(ValueError):
    """An instance mask cannot produce the requested prompt (empty, too few pixels)."""


class TrainingFault(RuntimeError):
    """Non-finite loss component during adaptation."""

    def __init__(self, component: str, message: str = ""):
        self.component = component
        super().__init__(message or f"non-finite value in loss component '{component}'")
