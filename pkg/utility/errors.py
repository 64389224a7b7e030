class LadmimError(Exception):
    exit_code: int = 1


class ShapeError(LadmimError):
    pass


class NonFiniteError(LadmimError):
    pass


class GraphError(LadmimError):
    pass


class LayoutError(LadmimError):
    pass


class AnomalyKindError(LadmimError):
    pass


class DatasetError(LadmimError):
    pass


class QuantizationError(LadmimError):
    pass


class MaskError(LadmimError):
    pass


class TargetModeError(LadmimError):
    pass


class CalibrationError(LadmimError):
    pass


class MetricError(LadmimError):
    pass


class ReportError(LadmimError):
    pass


class CheckpointError(LadmimError):
    pass


class ConfigError(LadmimError):
    exit_code = 1


class MissingStageError(LadmimError):
    exit_code = 2


class DivergenceError(LadmimError):
    exit_code = 3
