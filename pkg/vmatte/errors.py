"""
Error types for the video matting pipeline
Library code raises these; the CLI maps them to exit codes
"""


class VMatteError(Exception):
    """Base class of every error raised by vmatte"""


class InvalidInputError(VMatteError, ValueError):
    """An operation precondition was violated (shapes, ranges, counts)"""


class ConfigError(VMatteError, ValueError):
    """A configuration value, preset or variant name is invalid"""


class FormatError(VMatteError):
    """A file on disk does not follow the expected format"""


class SkipSample(VMatteError):
    """The sample cannot produce a training cube and should be skipped"""


class DivergenceError(VMatteError, RuntimeError):
    """Training produced a non-finite loss"""

    def __init__(self, step: int, terms: dict):
        self.step = step
        self.terms = terms
        details = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"loss diverged at step {step} ({details})")


# exit codes of the command line
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
