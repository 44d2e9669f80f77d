"""Exception hierarchy shared by every flowattack module.

The CLI maps these onto exit codes through :func:`exit_code_for`.
"""
from __future__ import annotations

import numpy as np


class FlowAttackError(Exception):
    """Base class for all errors raised by flowattack."""


class ContractError(FlowAttackError):
    """A precondition or postcondition of an operation was violated."""


class ShapeError(ContractError):
    def __init__(self, primitive: str, *shapes: tuple[int, ...]):
        self.primitive = primitive
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: shape mismatch {rendered}")


class TapeError(ContractError):
    pass


class BudgetExhaustedError(ContractError):
    def __init__(self, count: int, budget: int, requested: int):
        self.count = count
        self.budget = budget
        self.requested = requested
        super().__init__(
            f"query budget exhausted: {count} of {budget} used, batch of {requested} refused"
        )


class DomainError(FlowAttackError):
    """Argument outside the mathematical domain of an operation."""


class NumericError(FlowAttackError):
    def __init__(self, message: str, *, layer: int | None = None,
                 epoch: int | None = None, batch: int | None = None):
        self.layer = layer
        self.epoch = epoch
        self.batch = batch
        where = []
        if layer is not None:
            where.append(f"layer {layer}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ConditioningError(NumericError):
    def __init__(self, message: str, condition: float):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


class VarianceError(NumericError):
    pass


class FormatError(FlowAttackError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class ConfigError(FlowAttackError):
    pass


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (FormatError, FileNotFoundError)):
        return EXIT_FORMAT
    if isinstance(error, (NumericError, DomainError, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_USAGE
