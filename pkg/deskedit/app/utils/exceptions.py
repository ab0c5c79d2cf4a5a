from typing import Dict, Any, Optional, Sequence


class DeskEditException(Exception):
    """Base exception class for the deskedit application"""
    def __init__(self, message: str, exit_code: int = 1):
        self.message = message
        self.exit_code = exit_code
        super().__init__(self.message)


class DimensionError(DeskEditException):
    """Exception raised when tensor shapes do not agree"""
    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            named = " vs ".join(str(tuple(s)) for s in shapes)
            message = f"{message}: {named}"
        super().__init__(message, exit_code=3)


class GraphError(DeskEditException):
    """Exception raised when a gradient is requested for a tensor that is not on the tape"""
    def __init__(self, message: str):
        super().__init__(message, exit_code=3)


class NumericsError(DeskEditException):
    """Exception raised when an operation produces non-finite values"""
    def __init__(self, message: str):
        super().__init__(message, exit_code=3)


class ConfigurationError(DeskEditException):
    """Exception raised when configuration is invalid"""
    def __init__(self, message: str):
        super().__init__(message, exit_code=2)


class RangeError(DeskEditException):
    """Exception raised when a timestep lies outside the schedule"""
    def __init__(self, message: str, timestep: Optional[int] = None):
        detail = f"timestep {timestep}: {message}" if timestep is not None else message
        super().__init__(detail, exit_code=2)


class BankError(DeskEditException):
    """Exception raised when the memory bank has no entry for a timestep"""
    def __init__(self, message: str, timestep: Optional[int] = None):
        detail = f"memory bank has no entry for timestep {timestep}: {message}" if timestep is not None else message
        super().__init__(detail, exit_code=4)


class TrainingError(DeskEditException):
    """Exception raised when training diverges"""
    def __init__(self, message: str, step: Optional[int] = None):
        detail = f"training failed at step {step}: {message}" if step is not None else message
        super().__init__(detail, exit_code=5)


class DatasetError(DeskEditException):
    """Exception raised when reading or writing data files fails"""
    def __init__(self, message: str, path: Optional[str] = None):
        detail = f"{path}: {message}" if path else message
        super().__init__(detail, exit_code=6)


class SamplingError(DeskEditException):
    """Exception raised when a component fails inside the editing loop"""
    def __init__(self, message: str, timestep: Optional[int] = None):
        detail = f"sampling failed at timestep {timestep}: {message}" if timestep is not None else message
        super().__init__(detail, exit_code=7)


class SuiteError(DeskEditException):
    """Exception raised when an unknown verification suite is requested"""
    def __init__(self, message: str):
        super().__init__(message, exit_code=2)


def get_error_response(exception: Exception) -> Dict[str, Any]:
    """Convert exception to a standardized error response format"""
    if isinstance(exception, DeskEditException):
        return {"detail": exception.message, "exit_code": exception.exit_code}
    else:
        return {"detail": str(exception), "exit_code": 1}
