"""Error types. Each carries the CLI exit code its stage maps to."""


class RankCountError(Exception):
    exit_code = 1


class DataValidationError(RankCountError, ValueError):
    exit_code = 2


class DivergenceError(RankCountError, FloatingPointError):
    exit_code = 3


class DigestMismatchError(RankCountError):
    exit_code = 4

    def __init__(self, path, message="content digest mismatch"):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")


class BackendNotConfiguredError(RankCountError, RuntimeError):
    def __init__(self, name=None):
        msg = "backend not configured"
        if name:
            msg += f" ({name!r})"
        super().__init__(msg)
