"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid experiment configuration or coefficient parameters.

    ``key`` names the offending config entry and ``line`` its line in the
    config file, when known.
    """

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        super().__init__(message)
        self.key = key
        self.line = line


class AdmissibilityError(ConfigError):
    """Coefficients violate the dissipativity condition (margin <= 0)."""

    def __init__(self, margin: float, message: str | None = None):
        self.margin = margin
        ConfigError.__init__(self, message or f"inadmissible coefficients: dissipativity margin 2*lambda1 - 2*L_g - L_sigma2^2 = {margin:g}")


class BlowUpError(FloatingPointError):
    """A simulated path produced non-finite values."""

    def __init__(self, t: float, norms: dict):
        self.t = t
        self.norms = norms
        super().__init__(f"non-finite state at t={t:g}: {norms}")


class DiagnosticError(RuntimeError):
    """A numerical diagnostic failed its contract."""
