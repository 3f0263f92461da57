"""Package-level exception types."""


class ConfigurationError(ValueError):
    """Raised when a config value or file is invalid or inconsistent."""


class NonFiniteGradientError(RuntimeError):
    """Raised when a gradient estimate turns non-finite.

    Carries a diagnostic snapshot of the variational state so the failure
    can be inspected or reported without digging through logs.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
