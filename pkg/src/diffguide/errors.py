"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read or does not match the model."""
