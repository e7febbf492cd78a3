"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes or lengths do not agree."""


class LayoutError(ValueError):
    """Token geometry or segment labels are inconsistent."""


class ContractError(ValueError):
    """A call violated a documented precondition."""


class NumericError(FloatingPointError):
    """A computation produced a non-finite value."""
