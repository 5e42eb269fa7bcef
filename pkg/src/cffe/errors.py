"""Exception hierarchy shared by every module.

Each class carries a stable ``code`` (the class name) so the command line
can print a single machine-parseable error line.
"""

from __future__ import annotations


class CffeError(Exception):
    """Base class for all toolkit errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# panel_core
class MalformedCsv(CffeError, ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        super().__init__(message)


class DuplicateKey(CffeError, ValueError):
    def __init__(self, country: str, year: int):
        self.country = country
        self.year = year
        super().__init__(f"duplicate (country, year) pair: {country}/{year}")


class SchemaMismatch(CffeError, ValueError):
    pass


class EmptyGroup(CffeError, ValueError):
    pass


class YearOutOfRange(CffeError, ValueError):
    pass


class InvalidPanel(CffeError, ValueError):
    pass


# synth_dgp
class InvalidSpec(CffeError, ValueError):
    pass


class NoObservationsAtK(CffeError, ValueError):
    pass


# cffe_forest
class DegenerateNode(CffeError, ValueError):
    pass


class InsufficientData(CffeError, ValueError):
    pass


class DimensionMismatch(CffeError, ValueError):
    pass


class NoSplits(CffeError, ValueError):
    pass


class TooFewTrees(CffeError, ValueError):
    pass


# classic_estimators
class RankDeficient(CffeError, ValueError):
    def __init__(self, message: str, columns: list | None = None):
        self.columns = list(columns or [])
        super().__init__(message)


class TooFewClusters(CffeError, ValueError):
    pass


class NoNeverTreated(CffeError, ValueError):
    pass


class NoPrePeriod(CffeError, ValueError):
    pass


class NonConvergence(CffeError, RuntimeError):
    def __init__(self, message: str, result=None):
        self.result = result
        super().__init__(message)


class WindowTooSparse(CffeError, ValueError):
    pass


# inference_suite
class SingleCluster(CffeError, ValueError):
    pass


class TooFewValidReplicates(CffeError, RuntimeError):
    pass


class FakeDateTooLate(CffeError, ValueError):
    pass


class AssignedCountryIsTreated(CffeError, ValueError):
    pass


class TooFewTreated(CffeError, ValueError):
    pass


class SingularVcov(CffeError, ValueError):
    pass


class NoPrePeriods(CffeError, ValueError):
    pass


# effects_aggregation
class EmptyHorizon(CffeError, ValueError):
    pass


class GapInSupport(CffeError, ValueError):
    pass


# dsge_lab
class InvalidCalibration(CffeError, ValueError):
    pass


class SingularSystem(CffeError, RuntimeError):
    pass


class HorizonTooShort(CffeError, ValueError):
    pass


class WindowExceedsHorizon(CffeError, ValueError):
    pass


# cli_reporting
class IoFailure(CffeError, OSError):
    pass


class UsageError(CffeError, ValueError):
    pass
