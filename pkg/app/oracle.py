"""Simulated perfect static analysis.

A baseline run records the outcome of every tag test, per site and tested
tag; a second run on the same input treats every test whose outcome never
varied as already proven, so only the polymorphic ones are paid for. Shape and
overflow checks are left alone.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

from app.bbv import VM, Limits, RunResult, run_vm
from app.ir import LoweredProgram
from app.stats import TallyKey

logger = logging.getLogger(__name__)


@dataclass
class SiteOutcome:
    saw_true: bool = False
    saw_false: bool = False
    exec_count: int = 0

    @property
    def constant(self) -> Optional[bool]:
        """The only outcome ever seen, or None for a polymorphic site."""
        if self.saw_true != self.saw_false:
            return self.saw_true
        return None


class SiteOutcomeTable(dict[TallyKey, SiteOutcome]):
    """Outcomes of every executed tag test, keyed by (site, tested tag)."""

    def constant_sites(self) -> dict[TallyKey, bool]:
        return {
            site: outcome.constant
            for site, outcome in self.items()
            if outcome.constant is not None
        }

    def polymorphic_sites(self) -> list[TallyKey]:
        return sorted(
            (key for key, outcome in self.items() if outcome.constant is None),
            key=lambda key: (key[0], key[1].name),
        )


def record_outcomes(
    program: LoweredProgram,
    limits: Optional[Limits] = None,
    *,
    name: str = "<program>",
) -> tuple[SiteOutcomeTable, RunResult]:
    """Run in baseline mode and tabulate each tag-test site's outcomes."""
    vm = VM(program, "baseline", limits, name=name)
    run = run_vm(vm)
    table = SiteOutcomeTable()
    for key, tally in vm.sink.sites.items():
        table[key] = SiteOutcome(tally["sawTrue"], tally["sawFalse"], tally["count"])
    logger.debug(
        "%s: %d tag tests recorded, %d constant", name, len(table), len(table.constant_sites())
    )
    return table, run


def rerun_removed(
    program: LoweredProgram,
    table: SiteOutcomeTable,
    limits: Optional[Limits] = None,
    *,
    name: str = "<program>",
    output: Optional[Callable[[str], None]] = None,
) -> RunResult:
    """Rerun with constant-outcome sites executed as free jumps.

    Raises:
        DeterminismViolation: when a removed test produces the other outcome.
    """
    vm = VM(program, "oracle", limits, name=name, removed=table.constant_sites(), output=output)
    return run_vm(vm)
