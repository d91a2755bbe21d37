"""Run statistics and the comparison report built from them."""

import csv
import io
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, TypedDict

from app.exceptions import MissingBaseline
from app.typesys import TypeTag

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LADDER = ("baseline", "intra", "shapes", "entry", "entry+cont")
REPORT_MODES = LADDER + ("oracle",)
GEOMEAN_FLOOR = 1e-4


@dataclass
class StatsReport:
    """Counters of one run of one program in one mode."""

    program: str = "<program>"
    mode: str = "baseline"
    dynTagTests: int = 0
    dynShapeTests: int = 0
    staticTestsEliminated: int = 0
    staticShapeTestsEliminated: int = 0
    overflowChecks: int = 0
    versionsPerBlock: dict[int, int] = field(default_factory=dict)
    entryPointsPerFunction: dict[int, int] = field(default_factory=dict)
    continuationsCompiled: int = 0
    continuationsInvalidated: int = 0
    functionsCompiled: int = 0
    functionsCausingInvalidation: int = 0
    knownCalleeCalls: int = 0
    totalCalls: int = 0
    returnTagKnownDynamic: int = 0
    totalReturns: int = 0
    emittedInstrCount: int = 0
    compileEvents: int = 0
    compileSeconds: float = 0.0
    dynInstrs: int = 0
    genericVersions: int = 0
    entryFallbacks: int = 0
    globalInvalidations: int = 0
    unseenContinuations: int = 0
    shapeRetypes: int = 0

    def as_dict(self) -> dict:
        data = asdict(self)
        data["versionsPerBlock"] = {str(k): v for k, v in sorted(self.versionsPerBlock.items())}
        data["entryPointsPerFunction"] = {
            str(k): v for k, v in sorted(self.entryPointsPerFunction.items())
        }
        return data


class SiteTally(TypedDict):
    count: int
    sawTrue: bool
    sawFalse: bool


TallyKey = tuple[tuple[int, int], TypeTag]


class StatsSink:
    """Collects the events of one VM instance.

    Tag tests are tallied per site and tested tag so the oracle can replay a
    run. The dispatch loop bumps the hot counters (shape tests, overflow
    checks, calls and instructions) on `report` directly.
    """

    COUNTERS = {
        "static_eliminated": "staticTestsEliminated",
        "static_shape_eliminated": "staticShapeTestsEliminated",
        "continuation_compiled": "continuationsCompiled",
        "continuation_invalidated": "continuationsInvalidated",
        "return": "totalReturns",
        "known_return": "returnTagKnownDynamic",
        "compile": "compileEvents",
        "generic_version": "genericVersions",
        "entry_fallback": "entryFallbacks",
        "global_invalidation": "globalInvalidations",
        "unseen_continuation": "unseenContinuations",
    }

    def __init__(self, program: str = "<program>", mode: str = "baseline") -> None:
        self.report = StatsReport(program=program, mode=mode)
        self.sites: dict[TallyKey, SiteTally] = {}

    def tag_test(self, key: TallyKey, outcome: bool, counted: bool = True) -> None:
        tally = self.sites.get(key)
        if tally is None:
            tally = self.sites[key] = {"count": 0, "sawTrue": False, "sawFalse": False}
        if outcome:
            tally["sawTrue"] = True
        else:
            tally["sawFalse"] = True
        if counted:
            tally["count"] += 1
            self.report.dynTagTests += 1

    def record(self, kind: str, amount: int = 1) -> None:
        """Add `amount` to the counter named by a `COUNTERS` key."""
        attr = self.COUNTERS[kind]
        setattr(self.report, attr, getattr(self.report, attr) + amount)


def proportion(count: int, baseline: int) -> float:
    if baseline == 0:
        return 1.0 if count == 0 else float(count)
    return count / baseline


def geomean(values: Iterable[Optional[float]]) -> Optional[float]:
    """Geometric mean of the present values, each floored at `GEOMEAN_FLOOR`."""
    values = [max(v, GEOMEAN_FLOOR) for v in values if v is not None]
    if not values:
        return None
    return math.exp(sum(math.log(v) for v in values) / len(values))


RELATIVE_COLUMNS = ("invalidatingFunctionRate", "codeSizeVsIntra", "compileTimeVsIntra")


def report(runs: Iterable[StatsReport]) -> dict:
    """Comparison document: remaining-test proportions per program and mode.

    Each row also carries the share of compiled functions that invalidated
    continuations, and the code size and compile time relative to the same
    program's `intra` run (None without one).

    Raises:
        MissingBaseline: when the run set is empty or a program has no
            baseline run.
    """
    by_program: dict[str, dict[str, StatsReport]] = {}
    for run in runs:
        by_program.setdefault(run.program, {})[run.mode] = run
    if not by_program:
        raise MissingBaseline()

    programs = {}
    per_mode: dict[str, dict[str, list]] = {}
    for name, modes in sorted(by_program.items()):
        if "baseline" not in modes:
            raise MissingBaseline(name)
        base = modes["baseline"].dynTagTests
        intra = modes.get("intra")
        rows = {}
        for mode in sorted(modes, key=_mode_order):
            run = modes[mode]
            row = {
                "dynTagTests": run.dynTagTests,
                "proportion": proportion(run.dynTagTests, base),
                "dynShapeTests": run.dynShapeTests,
                "knownCalleeRate": _rate(run.knownCalleeCalls, run.totalCalls),
                "returnTagKnownRate": _rate(run.returnTagKnownDynamic, run.totalReturns),
                "continuationsInvalidated": run.continuationsInvalidated,
                "invalidatingFunctionRate": _rate(run.functionsCausingInvalidation, run.functionsCompiled),
                "emittedInstrCount": run.emittedInstrCount,
                "codeSizeVsIntra": _rate(run.emittedInstrCount, intra.emittedInstrCount) if intra else None,
                "compileEvents": run.compileEvents,
                "compileTimeVsIntra": _rate(run.compileSeconds, intra.compileSeconds) if intra else None,
                "dynInstrs": run.dynInstrs,
            }
            columns = per_mode.setdefault(mode, {})
            for column in ("proportion",) + RELATIVE_COLUMNS:
                columns.setdefault(column, []).append(row[column])
            rows[mode] = row
        programs[name] = rows
    ordered = sorted(per_mode.items(), key=lambda i: _mode_order(i[0]))
    return {
        "schema_version": SCHEMA_VERSION,
        "programs": programs,
        "geomean": {mode: geomean(columns["proportion"]) for mode, columns in ordered},
        "relative": {mode: _relative_summary(columns) for mode, columns in ordered},
    }


def _relative_summary(columns: dict[str, list]) -> dict[str, Optional[float]]:
    rates = [r for r in columns["invalidatingFunctionRate"] if r is not None]
    return {
        "invalidatingFunctionRate": statistics.fmean(rates) if rates else None,
        "codeSizeVsIntra": geomean(columns["codeSizeVsIntra"]),
        "compileTimeVsIntra": geomean(columns["compileTimeVsIntra"]),
    }


def _rate(part: float, whole: float) -> Optional[float]:
    return part / whole if whole else None


def _mode_order(mode: str) -> int:
    return REPORT_MODES.index(mode) if mode in REPORT_MODES else len(REPORT_MODES)


CSV_FIELDS = ("program", "mode", "dynTagTests", "proportion", "dynShapeTests", "dynInstrs") + RELATIVE_COLUMNS


def _cell(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def to_csv(document: dict) -> str:
    """One row per (program, mode), then one `geomean` row per mode.

    The summary rows hold the arithmetic mean of `invalidatingFunctionRate`.
    """
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for name, rows in document["programs"].items():
        for mode, row in rows.items():
            writer.writerow(
                [name, mode, row["dynTagTests"], _cell(row["proportion"]), row["dynShapeTests"], row["dynInstrs"]]
                + [_cell(row[column]) for column in RELATIVE_COLUMNS]
            )
    for mode, value in document["geomean"].items():
        relative = document["relative"][mode]
        writer.writerow(
            ["geomean", mode, "", _cell(value), "", ""] + [_cell(relative[column]) for column in RELATIVE_COLUMNS]
        )
    return out.getvalue()
