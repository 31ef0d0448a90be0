"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
BackendError -> 4.
"""


class SamSelectError(Exception):
    """Base class for all package errors."""


class ConfigError(SamSelectError):
    """Invalid configuration: bad flag values, missing files, bad mode sets."""


class DataError(SamSelectError):
    """Malformed or inconsistent input data (scenes, annotations, prompts)."""


class BackendError(SamSelectError):
    """Segmenter backend failure (missing model files, inference errors)."""


class VizExprError(SamSelectError):
    """Syntax or semantic error in a visualization expression.

    Carries the offending position so the CLI can print a caret marker.
    """

    def __init__(self, message: str, text: str = "", pos: int = -1):
        super().__init__(message)
        self.text = text
        self.pos = pos

    def caret_lines(self) -> str:
        if self.pos < 0:
            return str(self)
        return f"{self.text}\n{' ' * self.pos}^ {self}"
