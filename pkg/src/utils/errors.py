class DiffInfError(Exception):
    pass


class ConfigurationError(DiffInfError, ValueError):
    def __init__(self, message: str, violations: list[tuple[str, str]] | None = None):
        self.violations = violations or []
        if self.violations:
            details = "; ".join(f"{path}: {msg}" for path, msg in self.violations)
            message = f"{message} ({details})"
        super().__init__(message)


class NumericInputError(DiffInfError):
    pass


class TrainingDivergedError(DiffInfError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"Training diverged at step {step} (loss={loss})")


class SamplingDivergedError(DiffInfError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Sampling produced a non-finite state at step t={step}")


class ScheduleError(DiffInfError):
    pass


class PayloadError(DiffInfError):
    pass


class UnsupportedLayerError(DiffInfError):
    pass


class CurvatureNumericError(DiffInfError):
    pass


class OracleScaleError(DiffInfError):
    pass


class ProvenanceError(DiffInfError):
    pass


class UnknownIndexError(DiffInfError, KeyError):
    pass


class UndefinedCorrelationError(DiffInfError):
    pass


class ContainerError(DiffInfError):
    pass


class ChecksumError(ContainerError):
    pass
