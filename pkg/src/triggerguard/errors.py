"""Exception hierarchy shared across the package."""


class TriggerGuardError(Exception):
    pass


class ConfigError(TriggerGuardError, ValueError):
    """Invalid configuration value. ``key_path`` names the offending key when known."""

    def __init__(self, message, key_path=None):
        super().__init__(message if key_path is None else f"{key_path}: {message}")
        self.key_path = key_path


class IngestionError(TriggerGuardError, IOError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message} ({path})")
        self.path = path


class ValidationError(TriggerGuardError, ValueError):
    pass


class TrainingError(TriggerGuardError, RuntimeError):
    pass


class KeyMismatchError(TriggerGuardError, KeyError):
    """Verification key does not belong to the supplied trigger set."""

    def __str__(self):
        return str(self.args[0]) if self.args else "key mismatch"


class MissingArtifactError(TriggerGuardError, FileNotFoundError):
    def __init__(self, stage, path=None):
        super().__init__(f"missing upstream artifact for stage '{stage}'; run `triggerguard {stage}` first")
        self.stage = stage
        self.path = path
