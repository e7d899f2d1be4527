class ContractViolation(ValueError):
    """Raised when an argument breaks an operation's precondition."""


class DegenerateTriggerError(ContractViolation):
    pass


class DegenerateNormError(ValueError):
    """MAD of the reversed-trigger norms is zero; the anomaly index is undefined."""


class DatasetLoadError(IOError):
    def __init__(self, path, offset, reason):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{self.path}{where}: {reason}")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch, components):
        self.epoch = epoch
        self.batch = batch
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} ({parts})")


class UninitializedCenterError(RuntimeError):
    pass


class ConfigError(ValueError):
    """Config validation failure; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
