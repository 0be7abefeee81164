"""Exception hierarchy. CLI exit codes are attached to the two top-level kinds."""


class EmoartError(Exception):
    exit_code = 1


class ValidationError(EmoartError, ValueError):
    """Bad input: manifests, configs, shapes, category sets."""

    exit_code = 2


class ManifestError(ValidationError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigError(ValidationError):
    pass


class WeightsError(ValidationError):
    pass


class TrainingError(EmoartError, RuntimeError):
    """Runtime failure while training or evaluating (divergence, I/O)."""

    exit_code = 3


class DivergenceError(TrainingError):
    def __init__(self, epoch, batch_index, loss):
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch_index}"
        )
