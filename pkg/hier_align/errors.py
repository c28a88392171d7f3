"""
Exception types shared across hier_align.

Configuration problems are plain ``ValueError`` (raised from the frozen config
dataclasses); everything here covers bad data and broken numerics.
"""

from __future__ import annotations


class DataError(Exception):
    """Input data is malformed or inconsistent with what an operation needs."""


class DimensionError(DataError):
    """Tensor extents do not line up for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_IO = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (DataError, NonFiniteError)):
        return EXIT_DATA
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return 1
