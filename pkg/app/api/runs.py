import dataclasses
from typing import Any, Union

from flask import current_app, request

from app import corpus
from app.api import bp
from app.api.errors import bad_request, error_response
from app.bbv import MODES, Limits, execute
from app.exceptions import (
    DeterminismViolation,
    Halt,
    InvariantViolation,
    RefineConflict,
    SourceError,
)
from app.frontend import SourceProgram, parse_source
from app.ir import lower
from app.runtime import display


@bp.route("/corpus", methods=["GET"])
def get_corpus() -> dict[str, Any]:
    """Return the names of the shipped corpus programs."""
    return {"programs": corpus.program_names()}


@bp.route("/runs", methods=["POST"])
def create_run() -> Union[dict[str, Any], tuple[dict[str, Any], int]]:
    """Run a program in one mode and return its output and statistics.

    The body names either a corpus `program` or carries inline `source`, plus
    the `mode` and optional `maxvers`/`maxentries` overrides.

    Returns:
        run (dict[str, Any]): Printed lines, the final value and the run statistics.
    """
    data = request.get_json(silent=True) or {}
    if "mode" not in data or not ("source" in data or "program" in data):
        return bad_request("must include mode and one of source or program fields")
    mode = data["mode"]
    if mode not in MODES:
        return bad_request(f"unknown mode {mode!r}")

    overrides = {}
    for key in ("maxvers", "maxentries"):
        if key in data:
            if not isinstance(data[key], int) or isinstance(data[key], bool) or data[key] < 1:
                return bad_request(f"{key} must be a positive integer")
            overrides[key] = data[key]
    limits = dataclasses.replace(Limits.from_config(current_app.config), **overrides)

    try:
        if "source" in data:
            name = data.get("name", "<request>")
            program = SourceProgram(name, str(data["source"]))
        else:
            name = corpus.program_label(data["program"])
            if name not in corpus.program_names():
                return error_response(404, f"no corpus program {name!r}")
            program = corpus.load(name)
        lowered = lower(parse_source(program))
    except SourceError as e:
        return bad_request(str(e))

    try:
        run = execute(lowered, mode, limits, name=name)
    except Halt as e:
        report = getattr(e, "report", None)
        return error_response(
            422,
            e.message,
            kind=e.kind,
            output=getattr(e, "output", []),
            stats=report.as_dict() if report is not None else None,
        )
    except (InvariantViolation, RefineConflict, DeterminismViolation) as e:
        current_app.logger.error("%s (%s): invariant failure: %s", name, mode, e)
        return error_response(500, str(e))
    return {"output": run.output, "result": display(run.result), "stats": run.report.as_dict()}
