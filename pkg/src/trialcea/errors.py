"""Exception hierarchy.  Each class carries the CLI exit code it maps to."""


class TrialCeaError(Exception):
    exit_code = 1


class ValidationError(TrialCeaError, ValueError):
    exit_code = 2


class SchemaError(ValidationError):
    pass


class IntegrityError(ValidationError):
    pass


class MergeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ValueSetError(ValidationError):
    pass


class RankDeficiencyError(ValidationError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


class ImputationError(TrialCeaError):
    exit_code = 2


class ConvergenceError(TrialCeaError):
    exit_code = 3

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class BootstrapError(TrialCeaError):
    exit_code = 3
