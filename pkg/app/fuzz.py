"""Seeded generator of terminating, type-correct programs and the differential runner.

Generated programs only ever combine values in ways that cannot halt: numeric
operators see numbers, `+` on text sees text, `%` divides by a non-zero
literal, loops count up to a literal bound and functions only call functions
defined before them.
"""

import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from app.bbv import Limits, execute
from app.frontend import parse_source
from app.ir import lower
from app.refinterp import interpret
from app.stats import LADDER

logger = logging.getLogger(__name__)

MAX_DEPTH = 3
STRINGS = ('"a"', '"bb"', '"xyz"', '""', '"tree"')


@dataclass
class _Env:
    nums: list[str] = field(default_factory=list)
    texts: list[str] = field(default_factory=list)
    points: list[str] = field(default_factory=list)
    arrays: list[tuple[str, int]] = field(default_factory=list)


class ProgramGenerator:
    """Random programs over the corpus grammar, reproducible from a seed."""

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self.rng = random.Random(seed)
        self.num_funcs: list[tuple[str, int]] = []
        self.text_funcs: list[str] = []
        self.mixed_funcs: list[str] = []
        self.counter = 0

    def fresh(self, prefix: str) -> str:
        self.counter += 1
        return f"{prefix}{self.counter}"

    # Expressions.

    def int_literal(self) -> str:
        roll = self.rng.random()
        if roll < 0.05:
            return str(self.rng.choice((2_000_000_000, -2_000_000_000, 2_147_483_647)))
        if roll < 0.15:
            return repr(self.rng.choice((0.5, 2.5, -1.25, 3.0)))
        return str(self.rng.randint(-9, 20))

    def num(self, env: _Env, depth: int = 0) -> str:
        rng = self.rng
        options = ["lit"]
        if env.nums:
            options += ["var", "var"]
        if depth < MAX_DEPTH:
            options += ["bin", "bin", "neg"]
            if self.num_funcs:
                options.append("call")
            if env.points:
                options += ["prop", "method"]
            if env.arrays:
                options += ["index", "length"]
            if env.texts:
                options.append("strlen")
        kind = rng.choice(options)
        if kind == "lit":
            return self.int_literal()
        if kind == "var":
            return rng.choice(env.nums)
        if kind == "bin":
            op = rng.choice(("+", "-", "*", "%", "/", "+", "-"))
            left = self.num(env, depth + 1)
            if op == "%":
                return f"({left} % {rng.randint(1, 7)})"
            return f"({left} {op} {self.num(env, depth + 1)})"
        if kind == "neg":
            return f"(-{self.num(env, depth + 1)})"
        if kind == "call":
            name, arity = rng.choice(self.num_funcs)
            args = ", ".join(self.num(env, depth + 1) for _ in range(arity))
            return f"{name}({args})"
        if kind == "prop":
            return f"{rng.choice(env.points)}.{rng.choice(('x', 'y'))}"
        if kind == "method":
            return f"{rng.choice(env.points)}.sum()"
        if kind == "index":
            name, size = rng.choice(env.arrays)
            return f"{name}[{rng.randrange(size)}]"
        if kind == "length":
            return f"{rng.choice(env.arrays)[0]}.length"
        return f"{self.text(env, depth + 1)}.length"

    def text(self, env: _Env, depth: int = 0) -> str:
        rng = self.rng
        options = ["lit"]
        if env.texts:
            options += ["var", "var"]
        if depth < MAX_DEPTH:
            options.append("concat")
            if self.text_funcs and env.nums:
                options.append("call")
        kind = rng.choice(options)
        if kind == "lit":
            return rng.choice(STRINGS)
        if kind == "var":
            return rng.choice(env.texts)
        if kind == "concat":
            return f"({self.text(env, depth + 1)} + {self.text(env, depth + 1)})"
        name = rng.choice(self.text_funcs)
        return f"{name}({self.text(env, depth + 1)}, {self.num(env, depth + 1)})"

    def cond(self, env: _Env, depth: int = 0) -> str:
        rng = self.rng
        kind = rng.choice(("cmp", "cmp", "cmp", "eq", "not", "and", "or", "truthy"))
        if depth >= MAX_DEPTH:
            kind = "cmp"
        if kind == "cmp":
            op = rng.choice(("<", "<=", ">", ">=", "==", "!="))
            return f"({self.num(env, depth + 1)} {op} {self.num(env, depth + 1)})"
        if kind == "eq":
            return f"({self.text(env, depth + 1)} {rng.choice(('==', '!='))} {self.text(env, depth + 1)})"
        if kind == "not":
            return f"(!{self.cond(env, depth + 1)})"
        if kind == "truthy":
            value = self.num(env, depth + 1) if rng.random() < 0.6 else self.text(env, depth + 1)
            return value
        op = "&&" if kind == "and" else "||"
        return f"({self.cond(env, depth + 1)} {op} {self.cond(env, depth + 1)})"

    # Declarations.

    def num_function(self) -> str:
        name = self.fresh("f")
        arity = self.rng.randint(1, 3)
        params = [f"p{i}" for i in range(arity)]
        env = _Env(nums=list(params))
        lines = [f"function {name}({', '.join(params)}) {{", f"    var t = {self.num(env)};"]
        env.nums.append("t")
        if self.rng.random() < 0.6:
            lines.append(f"    if ({self.cond(env)}) {{ t = {self.num(env)}; }} else {{ t = t + 1; }}")
        if self.rng.random() < 0.5:
            bound = self.rng.randint(1, 4)
            lines += [
                "    var i = 0;",
                f"    while (i < {bound}) {{",
                f"        t = t + {self.num(env, 1)};",
                "        i = i + 1;",
                "    }",
            ]
        lines += [f"    return {self.num(env, 1)};", "}"]
        self.num_funcs.append((name, arity))
        return "\n".join(lines)

    def text_function(self) -> str:
        name = self.fresh("s")
        env = _Env(nums=["n"], texts=["s"])
        body = [
            f"function {name}(s, n) {{",
            f"    if ({self.cond(env)}) return s + {self.text(env, 2)};",
            "    return s;",
            "}",
        ]
        self.text_funcs.append(name)
        return "\n".join(body)

    def mixed_function(self) -> str:
        name = self.fresh("m")
        threshold = self.rng.randint(1, 6)
        body = [
            f"function {name}(k) {{",
            f"    if (k < {threshold}) return k * 2;",
            f"    if (k == {threshold + 1}) return null;",
            f"    return {self.rng.choice(STRINGS)} + \"!\";",
            "}",
        ]
        self.mixed_funcs.append(name)
        return "\n".join(body)

    CONSTRUCTOR = "\n".join(
        [
            "function Point(x, y) {",
            "    this.x = x;",
            "    this.y = y;",
            "    this.sum = function () { return this.x + this.y; };",
            "}",
        ]
    )

    def generate(self) -> str:
        """Source text of one program."""
        rng = self.rng
        parts = [self.CONSTRUCTOR]
        for _ in range(rng.randint(1, 3)):
            parts.append(self.num_function())
        if rng.random() < 0.7:
            parts.append(self.text_function())
        if rng.random() < 0.7:
            parts.append(self.mixed_function())

        env = _Env()
        main = []
        for _ in range(rng.randint(1, 3)):
            name = self.fresh("g")
            main.append(f"var {name} = {self.num(env)};")
            env.nums.append(name)
        name = self.fresh("w")
        main.append(f"var {name} = {self.text(env)};")
        env.texts.append(name)
        if rng.random() < 0.7:
            name = self.fresh("pt")
            main.append(f"var {name} = new Point({self.num(env)}, {self.num(env)});")
            env.points.append(name)
        if rng.random() < 0.5:
            name = self.fresh("arr")
            size = rng.randint(1, 4)
            elems = ", ".join(self.num(env, 2) for _ in range(size))
            main.append(f"var {name} = [{elems}];")
            env.arrays.append((name, size))

        bound = rng.randint(2, 8)
        main.append("var i = 0;")
        main.append(f"while (i < {bound}) {{")
        loop_env = _Env(nums=env.nums + ["i"], texts=env.texts, points=env.points, arrays=env.arrays)
        for _ in range(rng.randint(1, 4)):
            main.append("    " + self.loop_statement(loop_env))
        if self.mixed_funcs:
            main.append(f"    print({rng.choice(self.mixed_funcs)}(i));")
        main.append("    i = i + 1;")
        main.append("}")
        for _ in range(rng.randint(1, 3)):
            main.append(f"print({self.num(env)});")
        main.append(f"print({self.text(env)});")
        return "\n\n".join(parts) + "\n\n" + "\n".join(main) + "\n"

    def loop_statement(self, env: _Env) -> str:
        rng = self.rng
        kind = rng.choice(("print", "print", "update", "if", "prop"))
        if kind == "update" and len(env.nums) > 1:
            target = rng.choice([n for n in env.nums if n != "i"])
            return f"{target} = {self.num(env)};"
        if kind == "prop" and env.points:
            return f"{rng.choice(env.points)}.{rng.choice(('x', 'y'))} = {self.num(env)};"
        if kind == "if":
            return f"if ({self.cond(env)}) {{ print({self.num(env)}); }} else {{ print({self.text(env)}); }}"
        return f"print({self.num(env) if rng.random() < 0.7 else self.text(env)});"


def generate(seed: int) -> str:
    return ProgramGenerator(seed).generate()


@dataclass
class FuzzOutcome:
    seed: int
    source: str
    expected: list[str]
    implicit_tests: int
    mismatches: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches


def differential(
    source: str,
    modes: Iterable[str] = LADDER,
    limits: Optional[Limits] = None,
    seed: int = -1,
) -> FuzzOutcome:
    """Run one program in the reference interpreter and in every mode."""
    ast = parse_source(source)
    reference = interpret(ast)
    outcome = FuzzOutcome(seed, source, reference.output, reference.implicit_tests)
    limits = limits or Limits(validate=True)
    for mode in modes:
        run = execute(lower(ast), mode, limits, name=f"fuzz-{seed}")
        if run.output != reference.output:
            outcome.mismatches.append(f"{mode}: output differs")
        if mode == "baseline" and run.report.dynTagTests != reference.implicit_tests:
            outcome.mismatches.append(
                f"baseline: {run.report.dynTagTests} tag tests, reference counted {reference.implicit_tests}"
            )
    if outcome.mismatches:
        logger.warning("seed %d: %s", seed, "; ".join(outcome.mismatches))
    return outcome


def fuzz(seed: int, count: int, modes: Iterable[str] = LADDER) -> Iterator[FuzzOutcome]:
    """Differential outcomes of `count` programs generated from consecutive seeds."""
    modes = tuple(modes)
    for offset in range(count):
        yield differential(generate(seed + offset), modes, seed=seed + offset)
