class NowcastError(Exception):
    """Base class for every domain error raised by nowcast-kit."""


# -------------------------------------------------------------------
# GRID FILES
# -------------------------------------------------------------------
class GridFormatError(NowcastError):
    pass


class BadMagic(GridFormatError):
    pass


class UnsupportedVersion(GridFormatError):
    pass


class TruncatedFile(GridFormatError):
    pass


class PayloadMismatch(GridFormatError):
    pass


class PoolingError(NowcastError):
    pass


# -------------------------------------------------------------------
# SAMPLES AND STATIONS
# -------------------------------------------------------------------
class InvalidRate(NowcastError, ValueError):
    pass


class InvalidTargetIndex(NowcastError, ValueError):
    pass


class DimensionMismatch(NowcastError):
    pass


class StationOutsideGrid(NowcastError):
    def __init__(self, station_ids):
        self.station_ids = list(station_ids)
        super().__init__(f"Stations outside the grid: {', '.join(self.station_ids)}")


class DuplicateStation(NowcastError):
    pass


# -------------------------------------------------------------------
# MODEL
# -------------------------------------------------------------------
class InfeasiblePlan(NowcastError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"Stage {stage}: {message}")


class ShapeMismatch(NowcastError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"Stage {stage}: {message}")


class NonScalarLoss(NowcastError):
    pass


# -------------------------------------------------------------------
# LOSSES AND METRICS
# -------------------------------------------------------------------
class UnnormalizedProbabilities(NowcastError):
    pass


class InvalidGamma(NowcastError, ValueError):
    pass


class LengthMismatch(NowcastError):
    pass


class EmptyMatrix(NowcastError):
    pass


class EmptyGroups(NowcastError):
    pass


# -------------------------------------------------------------------
# BASELINES
# -------------------------------------------------------------------
class InsufficientData(NowcastError):
    pass


class DegenerateFit(NowcastError):
    pass


# -------------------------------------------------------------------
# TRAINING
# -------------------------------------------------------------------
class EmptyDataset(NowcastError):
    pass


class TransferMismatch(NowcastError):
    pass


class OptimizerShapeMismatch(NowcastError):
    pass


class CorruptCheckpoint(NowcastError):
    pass


class CheckpointConflict(NowcastError):
    def __init__(self, key, checkpoint_value, given):
        self.key = key
        super().__init__(f"Checkpoint was trained with {key}={checkpoint_value}, got --{key.replace('_', '-')} {given}")


class ConfigError(NowcastError):
    pass


class ConfigParseError(ConfigError):
    def __init__(self, line_number, message):
        self.line_number = line_number
        super().__init__(f"Line {line_number}: {message}")


class InvalidValue(ConfigError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"Invalid value for '{key}': {message}")


class UnknownKey(ConfigError):
    def __init__(self, key, line_number):
        self.key = key
        self.line_number = line_number
        super().__init__(f"Line {line_number}: unknown key '{key}'")


# -------------------------------------------------------------------
# SYNTHETIC DATA AND REPORTS
# -------------------------------------------------------------------
class InfeasibleScenario(NowcastError):
    pass


class UnreachablePrevalence(NowcastError):
    pass


class MissingReport(NowcastError):
    pass
