class ToothSegError(Exception):
    pass


class ValidationError(ToothSegError, ValueError):
    """Malformed input data (bad indices, count mismatches, out-of-range labels)."""


class ConfigError(ToothSegError, ValueError):
    """Invalid configuration value or combination."""


class DecimationError(ToothSegError, RuntimeError):
    def __init__(self, msg, achieved=None):
        super().__init__(msg)
        self.achieved = achieved


class TrainingDiverged(ToothSegError, RuntimeError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}
