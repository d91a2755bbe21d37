"""Exception hierarchy shared by every stage of the virtual machine."""

from typing import Iterable, Optional


class VMError(Exception):
    """Base class for every error raised by the virtual machine."""


class SourceError(VMError):
    """An error that points at a position in a corpus program."""

    def __init__(self, line: int, column: int, message: str) -> None:
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column
        self.message = message


class LexError(SourceError):
    """Illegal character or unterminated string/comment."""


class ParseError(SourceError):
    """The token stream does not match the grammar."""

    def __init__(self, line: int, column: int, expected: Iterable[str]) -> None:
        self.expected = tuple(sorted(set(expected)))
        super().__init__(line, column, "expected " + " or ".join(self.expected))


class LowerError(SourceError):
    """Unresolved identifier or misplaced `this`."""


class RefineConflict(VMError):
    """A context was narrowed to a tag disjoint from the one it held."""


class DuplicateProperty(VMError):
    """A property was defined twice along one shape path."""


class MissingProperty(VMError):
    """A property was re-typed on a shape that does not define it."""


class Halt(VMError):
    """The running program stopped with a fatal condition."""

    kind = "halt"

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class NotCallable(Halt):
    kind = "not-callable"


class StackOverflow(Halt):
    kind = "stack-overflow"


class DivideByZero(Halt):
    kind = "divide-by-zero"


class BudgetExceeded(Halt):
    kind = "budget-exceeded"


class InvariantViolation(VMError):
    """A soundness check of the validation mode failed."""


class MissingBaseline(VMError):
    """A report was requested for a program without a baseline run."""

    def __init__(self, program: Optional[str] = None) -> None:
        super().__init__(
            f"no baseline run for {program}" if program else "no baseline run"
        )
        self.program = program


class DeterminismViolation(VMError):
    """A test site removed by the oracle produced a different outcome."""
