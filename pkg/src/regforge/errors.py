"""Exception hierarchy shared by every layer of the engine.

Each class carries the CLI exit code it maps to, so the command-line
surface can translate failures without a lookup table.
"""
from __future__ import annotations


class RegforgeError(Exception):
    exit_code = 3
    kind = "error"

    def to_json(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class DimensionError(RegforgeError, ValueError):
    kind = "dimension"


class NumericFault(RegforgeError, FloatingPointError):
    """A NaN or Inf appeared in the output of a kernel."""

    exit_code = 4
    kind = "numeric_fault"

    def __init__(self, op: str, index: tuple[int, ...]):
        self.op = op
        self.index = tuple(int(i) for i in index)
        super().__init__(f"non-finite value in {op} at index {self.index}")

    def to_json(self) -> dict:
        return {**super().to_json(), "op": self.op, "index": list(self.index)}


class MissingParameterError(RegforgeError, KeyError):
    kind = "missing_parameter"

    def __init__(self, names):
        self.names = sorted(names)
        super().__init__(f"missing parameters: {', '.join(self.names)}")

    def __str__(self) -> str:
        return self.args[0]


class EditIndexError(RegforgeError, IndexError):
    kind = "index"


class PlanError(RegforgeError, ValueError):
    kind = "plan"


class MissingTapError(RegforgeError, KeyError):
    kind = "missing_tap"

    def __str__(self) -> str:
        return self.args[0] if self.args else "missing tap"


class EmptyInputError(RegforgeError, ValueError):
    kind = "empty_input"


class EmptyScanError(EmptyInputError):
    kind = "empty_scan"


class SpecError(RegforgeError, ValueError):
    kind = "spec"


class DecodeError(RegforgeError, ValueError):
    kind = "decode"


class InvariantViolation(RegforgeError, AssertionError):
    exit_code = 5
    kind = "invariant"
