"""Exception hierarchy shared across the package."""


class AWMLabError(Exception):
    pass


class DimensionError(AWMLabError, ValueError):
    pass


class GraphStateError(AWMLabError, RuntimeError):
    pass


class NumericError(AWMLabError, ArithmeticError):
    pass


class SpecError(AWMLabError, ValueError):
    pass


class PlanError(AWMLabError, ValueError):
    pass


class FormatError(AWMLabError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(AWMLabError, RuntimeError):
    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class ConfigError(AWMLabError, ValueError):
    pass


class StageError(AWMLabError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class ContractError(AWMLabError, ValueError):
    pass


class LengthError(FormatError):
    pass


class ConsistencyError(FormatError):
    pass
