"""Exception hierarchy.

Every exception carries the module and operation it was raised from so the
command line front end can report the origin of a failure.
"""


class DelayStabError(Exception):
    """Base class for all errors raised by the package."""

    module = "delay_stab"
    operation = ""

    def __init__(self, message, *, operation=None):
        if operation is not None:
            self.operation = operation
        super().__init__(message)

    def origin(self):
        if self.operation:
            return f"{self.module}.{self.operation}"
        return self.module

    def __str__(self):
        return f"[{self.origin()}] {super().__str__()}"


# spectral


class SpectralError(DelayStabError):
    module = "spectral"


class InvalidPlant(SpectralError):
    pass


class NonIncreasingSpectrum(SpectralError):
    operation = "solve_eigen"


class GridMismatch(SpectralError):
    operation = "project_coefficients"


class DualFormulaMismatch(SpectralError):
    operation = "boundary_input_coefficients"


class InsufficientModes(DelayStabError):
    module = "spectral"
    operation = "tail_quantities"


# synthesis


class SynthesisError(DelayStabError):
    module = "synthesis"


class UncontrollableMode(SynthesisError):
    operation = "place_gains"


class UnobservableMode(SynthesisError):
    operation = "place_gains"


class PoleSpecError(SynthesisError):
    operation = "place_gains"


class DimensionMismatch(SynthesisError):
    operation = "assemble_reduced"


class ZeroGain(SynthesisError):
    operation = "initial_observer_state"


# certification


class CertificationError(DelayStabError):
    module = "certification"


class NotHurwitz(CertificationError):
    operation = "solve_lyapunov"


class IllConditioned(CertificationError):
    operation = "solve_lyapunov"


class BudgetExceeded(CertificationError):
    operation = "certify"

    def __init__(self, message, report=None, **kw):
        super().__init__(message, **kw)
        self.report = report


class MissingCertificate(DelayStabError):
    module = "simulation"
    operation = "lyapunov_trace"


class MissingModalData(DelayStabError):
    module = "simulation"
    operation = "lyapunov_trace"


# runtime / simulation


class BufferUnderrun(DelayStabError):
    module = "runtime"
    operation = "HistoryBuffer.value"


class CausalityViolation(DelayStabError):
    module = "runtime"
    operation = "HistoryBuffer.value"


class LinearSolveFailure(DelayStabError):
    module = "simulation"
    operation = "step_fd"


class IncompatibleInitialData(DelayStabError):
    module = "simulation"
    operation = "run_closed_loop"

    def __init__(self, violations, **kw):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations), **kw)


class NonPositiveSamples(DelayStabError):
    module = "simulation"
    operation = "fit_decay_rate"


# configuration


class ConfigError(DelayStabError):
    module = "config"


class ParseError(ConfigError):
    operation = "parse_config"


class ValidationError(ConfigError):
    operation = "parse_config"

    def __init__(self, violations, **kw):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations), **kw)
