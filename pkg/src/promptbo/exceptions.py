"""Exception hierarchy shared across the package."""


class PromptBOError(Exception):
    """Base class for all package errors."""


class ParseError(PromptBOError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataValidationError(PromptBOError, ValueError):
    pass


class PartitionError(PromptBOError, ValueError):
    pass


class ContractError(PromptBOError, ValueError):
    """A documented precondition was violated by the caller."""


class BackendError(PromptBOError, RuntimeError):
    pass


class ExtractionError(PromptBOError, ValueError):
    def __init__(self, message, raw_response=""):
        self.raw_response = raw_response
        super().__init__(message)


class EvaluationError(PromptBOError, RuntimeError):
    def __init__(self, message, example_id=None):
        self.example_id = example_id
        super().__init__(message)


class NumericalError(PromptBOError, ArithmeticError):
    pass


class OptimizationError(PromptBOError, RuntimeError):
    def __init__(self, message, last_good=None):
        self.last_good = last_good
        super().__init__(message)


class SelectionError(PromptBOError, ValueError):
    pass


class ExpansionError(PromptBOError, RuntimeError):
    pass


class EditError(ExpansionError):
    pass


class ExpansionExhausted(ExpansionError):
    pass


class ConfigError(PromptBOError, ValueError):
    def __init__(self, message, key=None):
        self.key = key
        if key:
            message = f"{key}: {message}"
        super().__init__(message)


class RunAborted(PromptBOError, RuntimeError):
    def __init__(self, message, trajectory=None):
        self.trajectory = trajectory
        super().__init__(message)
