from typing import Optional


class IcmError(Exception):
    """
    Base error for the pipeline. Carries a human readable detail and the process
    exit code the command line maps it to.
    """
    exit_code: int = 2

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class UsageError(IcmError):
    exit_code = 1


class NumericalError(IcmError):
    exit_code = 2


class DatasetFailure(IcmError):
    exit_code = 3


# --- materials ---

class NonPositiveJacobian(NumericalError):
    pass


class DomainViolation(NumericalError):
    pass


class DegenerateBasis(NumericalError):
    pass


class UnknownSubsetRule(UsageError):
    pass


# --- discretization / solver ---

class MeshGenerationFailure(NumericalError):
    pass


class DegenerateElement(NumericalError):
    pass


class NodeNotInElement(UsageError):
    pass


class UnknownBoundarySet(UsageError):
    pass


class NonConvergence(NumericalError):
    def __init__(self, detail: str, report=None):
        super().__init__(detail)
        self.report = report


class LineSearchFailure(NonConvergence):
    pass


# --- tokenizer / network / training ---

class ZeroRowNorm(NumericalError):
    pass


class ShapeMismatch(NumericalError):
    pass


class NonFiniteActivation(NumericalError):
    def __init__(self, detail: str, layer: str = ""):
        super().__init__(detail)
        self.layer = layer


class DegeneratePrediction(NumericalError):
    pass


class TrainingAborted(NumericalError):
    pass


# --- inference / enn ---

class ZeroTrueForce(NumericalError):
    pass


class ZeroAlpha(NumericalError):
    pass


class DegenerateRange(NumericalError):
    pass


class ZeroForceScale(NumericalError):
    pass


# --- artifacts ---

class MissingArtifact(UsageError):
    def __init__(self, path: str, what: str = "artifact"):
        super().__init__(f"Missing {what}: expected at '{path}'")
        self.path = path


class InvalidConfiguration(UsageError):
    pass


class ExtrapolationWarning(UserWarning):
    """Learned constitutive law queried outside the invariant range its context covers."""


class InsufficientTokensWarning(UserWarning):
    """Selected fields hold fewer tokens than the configured lower bound."""
