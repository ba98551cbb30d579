"""Exception types shared across the package.

Every error carries a short ``code`` used by the CLI for its one-line
``code=NAME detail=...`` messages and an ``exit_status``.
"""


class LdruError(Exception):
    code = "error"
    exit_status = 3


class InputDomainError(LdruError, ValueError):
    code = "input_domain"


class ConfigurationError(LdruError, ValueError):
    code = "configuration"


class TaskLookupError(LdruError, KeyError):
    code = "unknown_task"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ResourceError(LdruError, RuntimeError):
    code = "resource"


class ShapeError(LdruError, ValueError):
    code = "shape"


class ContractError(LdruError, RuntimeError):
    code = "contract"


class FormatError(LdruError, ValueError):
    code = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(LdruError, FloatingPointError):
    code = "divergence"
    exit_status = 4
