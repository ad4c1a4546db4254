"""Exception types raised across the package."""

from __future__ import annotations


class ParameterError(ValueError):
    """Invalid argument value (bad bit width, non power-of-two amplifier, ...)."""


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


class FormatError(ValueError):
    """A tensor file does not follow the QTNS layout."""


class LengthError(FormatError):
    """A tensor file payload is shorter or longer than its header declares."""


class NonFiniteError(ValueError):
    """NaN or Inf encountered where only finite reals are accepted."""


class ScaleOverflowError(OverflowError):
    """An amplified scale does not fit in a signed 32-bit integer."""


class AccumulatorOverflowError(OverflowError):
    """A 32-bit accumulator window was exceeded while running a GEMM in strict mode."""

    def __init__(self, row: int, col: int, value: int):
        self.row = row
        self.col = col
        self.value = value
        super().__init__(
            f"int32 accumulator overflow at output ({row}, {col}): value {value}"
        )
