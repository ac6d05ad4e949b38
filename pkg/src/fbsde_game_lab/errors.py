"""Exception types shared across the lab."""


class InvalidArgument(ValueError):
    """Bad shapes, out-of-range parameters, malformed scenario input."""


class NumericalFailure(ArithmeticError):
    """A numerical routine lost a property it is required to keep."""

    def __init__(self, message, **report):
        super().__init__(message)
        self.report = report


class ContractViolation(RuntimeError):
    """A strategy or deviation broke the information (adaptedness) contract."""
