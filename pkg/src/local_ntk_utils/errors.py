"""exception types raised by the numerical modules

Everything derives from ``ValueError`` so that callers written against plain
``ValueError`` checks keep working. ``NumericalFailure`` separates "the numbers
did not behave" from "the caller passed bad arguments" (the command line maps the
former to exit code 1 and the latter to exit code 2).
"""


class NumericalFailure(ValueError):
    pass


class QuadratureNotConverged(NumericalFailure):
    def __init__(self, message: str, degree: int | None = None):
        super().__init__(message)
        self.degree = degree


class NotPositiveDefinite(NumericalFailure):
    def __init__(self, message: str, lambda_min: float | None = None):
        super().__init__(message)
        self.lambda_min = lambda_min


class UnreliableSpectrum(NumericalFailure):
    pass


class TrainingDiverged(NumericalFailure):
    """gradient descent blew up; ``diagnostics`` is json-serializable"""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = {} if diagnostics is None else diagnostics
