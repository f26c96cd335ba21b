"""Exception types raised across the package."""


class BeliefRLError(Exception):
    pass


class ShapeError(BeliefRLError, ValueError):
    pass


class DomainError(BeliefRLError, ValueError):
    pass


class ContractError(BeliefRLError, ValueError):
    pass


class DegenerateWeightsError(BeliefRLError, FloatingPointError):
    """All particle weights are zero (every log-weight is -inf or NaN)."""


class ImpossibleEvidenceError(BeliefRLError, FloatingPointError):
    """An observation has zero probability under the current belief."""


class NumericalError(BeliefRLError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(BeliefRLError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
