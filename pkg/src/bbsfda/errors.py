"""Exception hierarchy. Each category maps to a CLI exit code."""


class BBSFDAError(Exception):
    exit_code = 4


class ConfigError(BBSFDAError, ValueError):
    exit_code = 2


class DataError(BBSFDAError, ValueError):
    exit_code = 3


class InputError(BBSFDAError, ValueError):
    """Shapes or class counts of the arguments do not line up."""

    exit_code = 4


class CheckpointError(BBSFDAError):
    exit_code = 4


class TrainingError(BBSFDAError, RuntimeError):
    exit_code = 4


class ProtocolError(BBSFDAError):
    exit_code = 4


class TransportError(BBSFDAError, ConnectionError):
    exit_code = 4


class PredictorError(BBSFDAError, RuntimeError):
    def __init__(self, sample_id, cause):
        super().__init__(f"predictor failed on sample {sample_id!r}: {cause}")
        self.sample_id = sample_id
