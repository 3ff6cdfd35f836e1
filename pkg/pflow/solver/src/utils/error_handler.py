from typing import Optional, Dict, Any, List
from utils.logger import get_logger

logger = get_logger(__name__)


class PflowError(Exception):
    """Base error carrying an error code"""
    code = 'ERR_000'

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class DomainError(PflowError, ValueError):
    code = 'NUM_001'


class SingularityError(PflowError, ArithmeticError):
    code = 'NUM_002'


class MeshError(PflowError, ValueError):
    code = 'MSH_001'


class ConfigError(PflowError, ValueError):
    code = 'CFG_001'


class SolverError(PflowError, RuntimeError):
    code = 'SLV_001'

    def __init__(self, message: str, code: Optional[str] = None,
                 residual_history: Optional[List[float]] = None,
                 step: Optional[int] = None):
        super().__init__(message, code)
        self.residual_history = list(residual_history or [])
        self.step = step

    def at_step(self, step: int) -> 'SolverError':
        """Return a copy tagged with the failing time step"""
        return SolverError(
            f"Step {step}: {self}",
            code=self.code,
            residual_history=self.residual_history,
            step=step
        )


class IndefiniteTangentError(SolverError):
    code = 'SLV_002'


# Exit codes used by the command line front end
EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_SLOPE = 2
EXIT_CONFIG = 64


class ErrorHandler:
    def __init__(self):
        self.logger = logger
        self.error_codes = {
            # Configuration errors
            'CFG_001': 'Invalid configuration',
            'CFG_002': 'Coupling condition violated',
            'CFG_003': 'Invalid embedding pair',
            'CFG_004': 'Unknown configuration key',

            # Numerical errors
            'NUM_001': 'Argument outside the domain',
            'NUM_002': 'Singular derivative request',
            'NUM_003': 'Invalid quadrature degree',

            # Mesh errors
            'MSH_001': 'Degenerate or invalid mesh',
            'MSH_002': 'Cell index out of range',

            # Solver errors
            'SLV_001': 'Newton iteration did not converge',
            'SLV_002': 'Indefinite or singular tangent',
            'SLV_003': 'Linear solve failed'
        }

    def handle_error(self, error: Exception) -> Dict[str, Any]:
        """Handle and format error"""
        try:
            error_code = getattr(error, 'code', 'ERR_000')
            error_info = {
                'code': error_code,
                'message': self.error_codes.get(error_code, 'Unknown error'),
                'details': str(error),
                'type': error.__class__.__name__
            }
            if isinstance(error, SolverError) and error.step is not None:
                error_info['step'] = error.step

            self.logger.error(
                f"Error {error_code}: {error_info['message']} - {error_info['details']}"
            )

            return error_info

        except Exception as e:
            self.logger.error(f"Error handler failed: {str(e)}")
            return {
                'code': 'ERR_000',
                'message': 'Error handling failed',
                'details': str(e),
                'type': 'ErrorHandlerError'
            }

    def exit_code(self, error: Exception) -> int:
        """Map an exception to a command line exit code"""
        if isinstance(error, (ConfigError, DomainError, MeshError)):
            return EXIT_CONFIG
        return EXIT_SOLVER

    def format_user_message(self, error_info: Dict[str, Any]) -> str:
        """Format user-friendly error message"""
        messages = {
            'CFG_002': "The mesh/time-step coupling h^(4/p') <= sigma0*kappa fails. "
                       "Increase sigma0 or the number of time steps.",
            'CFG_003': "The requested Sobolev embedding is not compact.",
            'SLV_001': "Newton's method did not converge. Try a smaller time step "
                       "or a looser tolerance."
        }

        return messages.get(
            error_info['code'],
            f"An error occurred: {error_info['details']}"
        )
