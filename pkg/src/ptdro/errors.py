"""Exception types shared across the package."""


class PtdroError(Exception):
    """Base class for every error raised by this package."""


class ValidationFailure(PtdroError):
    """Input data violates a model invariant."""


class DomainError(ValidationFailure):
    pass


class NoPath(ValidationFailure):
    pass


class BadBigM(ValidationFailure):
    pass


class InfeasibleSpec(ValidationFailure):
    pass


class BudgetOrder(ValidationFailure):
    pass


class ProbabilityOrder(ValidationFailure):
    pass


class TerminalProbability(ValidationFailure):
    pass


class EmptyHistory(ValidationFailure):
    pass


class DimensionMismatch(ValidationFailure):
    pass


class NonlinearResidue(ValidationFailure):
    pass


class SolverFailure(PtdroError):
    """A solve did not produce a usable optimum."""


class Infeasible(SolverFailure):
    pass


class Unbounded(SolverFailure):
    pass


class NumericalFailure(SolverFailure):
    pass


class InfeasibleFixing(SolverFailure):
    pass


class DualUnavailable(SolverFailure):
    pass


class MasterInfeasible(SolverFailure):
    pass


class RecourseInfeasible(SolverFailure):
    def __init__(self, message, sigma=None, slot=None):
        super().__init__(message)
        self.sigma = sigma
        self.slot = slot


class IterationLimit(PtdroError):
    """Raised only when a caller asks for strict convergence."""


class ConfigError(ValidationFailure):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ConfigValidationError(ConfigError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
