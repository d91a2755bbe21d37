"""Experiment commands: run, matrix, bench and fuzz."""

import dataclasses
import json
import statistics
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import click
from flask import Blueprint, current_app

from app import corpus
from app.bbv import MODES, VM, Limits, execute, run_vm
from app.exceptions import (
    DeterminismViolation,
    Halt,
    InvariantViolation,
    MissingBaseline,
    RefineConflict,
    SourceError,
)
from app.frontend import parse_source
from app.ir import dump, lower
from app.runtime import Closure, display
from app.stats import LADDER, SCHEMA_VERSION, report, to_csv

bp = Blueprint("vm", __name__, cli_group=None)

EXIT_OK, EXIT_HALT, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3


@contextmanager
def exit_codes() -> Iterator[None]:
    """Map engine errors to the command's exit status."""
    ctx = click.get_current_context()
    try:
        yield
    except FileNotFoundError as e:
        click.echo(f"error: no such program: {e.filename}", err=True)
        ctx.exit(EXIT_USAGE)
    except SourceError as e:
        click.echo(f"error: {e}", err=True)
        ctx.exit(EXIT_USAGE)
    except Halt as e:
        click.echo(f"halt ({e.kind}): {e.message}", err=True)
        ctx.exit(EXIT_HALT)
    except (InvariantViolation, RefineConflict, DeterminismViolation) as e:
        current_app.logger.error("invariant failure: %s", e)
        click.echo(f"internal error: {e}", err=True)
        ctx.exit(EXIT_INTERNAL)


def build_limits(maxvers: Optional[int], maxentries: Optional[int], validate: bool, entry_shapes: bool) -> Limits:
    """Configured limits with command-line overrides applied."""
    limits = Limits.from_config(current_app.config)
    overrides = {}
    if maxvers is not None:
        overrides["maxvers"] = maxvers
    if maxentries is not None:
        overrides["maxentries"] = maxentries
    if validate:
        overrides["validate"] = True
    if entry_shapes:
        overrides["entry_shapes"] = True
    return dataclasses.replace(limits, **overrides)


def write_json(path: str, document: dict) -> None:
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def limit_options(f):
    f = click.option("--maxvers", type=click.IntRange(min=1), help="Versions per block before the generic fallback.")(f)
    f = click.option("--maxentries", type=click.IntRange(min=1), help="Entry points per function.")(f)
    f = click.option("--validate", is_flag=True, help="Check contexts and shapes against live values.")(f)
    f = click.option("--entry-shapes", is_flag=True, help="Keep object shapes in entry point keys.")(f)
    return f


@bp.cli.group("vm")
def vm_commands():
    """Basic block versioning virtual machine."""
    pass


@vm_commands.command()
@click.argument("program")
@click.option("--mode", type=click.Choice(MODES), default="entry+cont", show_default=True)
@limit_options
@click.option("--dump-ir", is_flag=True, help="Print the lowered program before running.")
@click.option("--dump-shapes", is_flag=True, help="Print the shape transition tree after running.")
@click.option("--dump-versions", is_flag=True, help="Print entry points and block versions after running.")
@click.option("--stats", "stats_path", type=click.Path(dir_okay=False), help="Write the run statistics as JSON.")
def run(program, mode, maxvers, maxentries, validate, entry_shapes, dump_ir, dump_shapes, dump_versions, stats_path):
    """Run PROGRAM (a corpus name or a path) in one mode."""
    limits = build_limits(maxvers, maxentries, validate, entry_shapes)
    name = corpus.program_label(program)
    with exit_codes():
        lowered = lower(parse_source(corpus.load(program)))
        if dump_ir:
            click.echo(dump(lowered))
        try:
            result = execute(lowered, mode, limits, name=name, output=click.echo)
        except Halt as e:
            if stats_path and getattr(e, "report", None) is not None:
                write_json(stats_path, {"schema_version": SCHEMA_VERSION, "run": e.report.as_dict()})
            raise
        if dump_shapes:
            click.echo(result.vm.heap.shapes.dump(), nl=False)
        if dump_versions:
            click.echo(result.vm.dump_versions(), nl=False)
        if stats_path:
            write_json(stats_path, {"schema_version": SCHEMA_VERSION, "run": result.report.as_dict()})
        current_app.logger.info("%s (%s): result %s", name, mode, display(result.result))
        click.echo(
            f"{name} [{mode}] dynTagTests={result.report.dynTagTests} "
            f"dynShapeTests={result.report.dynShapeTests} dynInstrs={result.report.dynInstrs}",
            err=True,
        )


@vm_commands.command()
@click.argument("programs", nargs=-1)
@click.option("--mode", "modes", type=click.Choice(MODES), multiple=True, help="Modes to run; all by default.")
@limit_options
@click.option("--stats", "stats_path", type=click.Path(dir_okay=False), help="Write the comparison report as JSON.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Write the comparison report as CSV.")
def matrix(programs, modes, maxvers, maxentries, validate, entry_shapes, stats_path, csv_path):
    """Run every PROGRAM in every mode and compare remaining tag tests.

    Without PROGRAMS the whole corpus is used.
    """
    limits = build_limits(maxvers, maxentries, validate, entry_shapes)
    programs = programs or tuple(corpus.program_names())
    modes = modes or MODES
    if "baseline" not in modes:
        modes = ("baseline",) + tuple(modes)
    runs = []
    with exit_codes():
        for program in programs:
            name = corpus.program_label(program)
            lowered = lower(parse_source(corpus.load(program)))
            for mode in modes:
                runs.append(execute(lowered, mode, limits, name=name).report)
        try:
            document = report(runs)
        except MissingBaseline as e:
            raise click.UsageError(str(e))
    for name, rows in document["programs"].items():
        cells = "  ".join(f"{mode}={row['proportion']:.3f}" for mode, row in rows.items())
        click.echo(f"{name:<16} {cells}")
    click.echo(f"{'geomean':<16} " + "  ".join(f"{m}={v:.3f}" for m, v in document["geomean"].items()))
    if stats_path:
        write_json(stats_path, document)
    if csv_path:
        Path(csv_path).write_text(to_csv(document), encoding="utf-8")


@vm_commands.command()
@click.argument("program")
@click.option("--mode", type=click.Choice(MODES[:-1]), default="entry+cont", show_default=True)
@limit_options
@click.option("--warmup", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--timing", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--stats", "stats_path", type=click.Path(dir_okay=False), help="Write the timing report as JSON.")
def bench(program, mode, maxvers, maxentries, validate, entry_shapes, warmup, timing, stats_path):
    """Call PROGRAM's benchmarkRun() repeatedly inside one VM."""
    limits = build_limits(maxvers, maxentries, validate, entry_shapes)
    name = corpus.program_label(program)
    with exit_codes():
        machine = VM(lower(parse_source(corpus.load(program))), mode, limits, name=name)
        run_vm(machine)
        if not isinstance(machine.heap.globals.get("benchmarkRun"), Closure):
            raise click.UsageError(f"corpus convention violated: {name} defines no benchmarkRun()")
        for _ in range(warmup):
            machine.call_global("benchmarkRun")
        samples = []
        instrs_before = machine.stats.dynInstrs
        for _ in range(timing):
            start = machine.builtins.clock([])
            machine.call_global("benchmarkRun")
            samples.append(machine.builtins.clock([]) - start)
    stats = machine.finish()
    document = {
        "schema_version": SCHEMA_VERSION,
        "program": name,
        "mode": mode,
        "warmup": warmup,
        "samples": samples,
        "medianMs": statistics.median(samples) if samples else None,
        "totalMs": sum(samples),
        "timedDynInstrs": stats.dynInstrs - instrs_before,
        "run": stats.as_dict(),
    }
    median = f"{document['medianMs']:.3f}ms" if samples else "n/a"
    click.echo(f"{name} [{mode}] samples={len(samples)} median={median} dynInstrs={document['timedDynInstrs']}")
    if stats_path:
        write_json(stats_path, document)


@vm_commands.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--count", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--mode", "modes", type=click.Choice(LADDER), multiple=True, help="Modes to compare; all by default.")
def fuzz(seed, count, modes):
    """Compare generated programs against the reference interpreter."""
    from app.fuzz import fuzz as run_fuzz

    failures = 0
    with exit_codes():
        for outcome in run_fuzz(seed, count, modes or LADDER):
            if not outcome.ok:
                failures += 1
                click.echo(f"seed {outcome.seed}: " + "; ".join(outcome.mismatches), err=True)
    click.echo(f"{count} programs, {failures} mismatches")
    if failures:
        click.get_current_context().exit(EXIT_INTERNAL)
