"""Exception hierarchy shared by every module."""


class GCLabError(Exception):
    pass


class ShapeError(GCLabError, ValueError):
    pass


class ConfigError(GCLabError, ValueError):
    pass


class ConstructionError(ConfigError):
    """Block spec violates a divisibility / ratio constraint."""


class ContractError(GCLabError, ValueError):
    pass


class TensorFormatError(GCLabError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class TrainingError(GCLabError, RuntimeError):
    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")
