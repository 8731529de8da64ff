"""Exception hierarchy shared by all fedgrow modules."""


class FedgrowError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FedgrowError):
    """Invalid model architecture, shapes, or experiment configuration."""


class ScheduleError(FedgrowError):
    """A growth schedule failed validation.

    Carries the full list of violations so callers can report every
    problem at once instead of fixing them one by one.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class TransformError(FedgrowError):
    """A model transform is unsupported or structurally invalid here."""


class NumericalError(FedgrowError):
    """Training produced a non-finite value; message carries context."""


class DataFormatError(FedgrowError):
    """A dataset file is malformed (bad magic, truncation, count mismatch)."""
