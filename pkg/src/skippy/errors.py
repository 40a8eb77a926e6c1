"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Malformed MDP, policy, feature table or operator input."""


class ConfigError(ValueError):
    """Learner or sweep configuration is inconsistent."""


class CertificateError(RuntimeError):
    """Optimal design failed its 2d certificate."""

    def __init__(self, message, worst_ratio):
        super().__init__(message)
        self.worst_ratio = worst_ratio


class EmptyFilterError(RuntimeError):
    """No candidate modification passed the width filter."""

    def __init__(self, message, worst_widths):
        super().__init__(message)
        self.worst_widths = worst_widths
