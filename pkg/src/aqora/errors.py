"""Exception hierarchy; each category maps to a CLI exit code."""


class AqoraError(Exception):
    exit_code = 1


class ConfigError(AqoraError):
    exit_code = 2


class DataError(AqoraError):
    exit_code = 3


class TrainingError(AqoraError):
    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CartesianProductError(DataError):
    """A table subset or join has no connecting equijoin condition."""

    def __init__(self, tables=()):
        names = ", ".join(sorted(tables))
        super().__init__(f"{{{names}}} would require Cartesian product")
        self.tables = frozenset(tables)


class PlanningError(AqoraError):
    exit_code = 2


class InvalidActionError(AqoraError):
    exit_code = 4
