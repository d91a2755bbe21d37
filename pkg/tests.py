import json
import math
import random
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from app import corpus, create_app
from app.bbv import VM, CallSite, Limits, execute, run_vm
from app.exceptions import (
    DeterminismViolation,
    DuplicateProperty,
    Halt,
    LexError,
    LowerError,
    MissingBaseline,
    MissingProperty,
    NotCallable,
    ParseError,
    RefineConflict,
)
from app.frontend import parse_source, tokenize, unparse
from app.fuzz import ProgramGenerator, differential, fuzz
from app.ir import BasicBlock, FunctionIR, Instr, Return, TagTest, lower, verify
from app.oracle import SiteOutcome, record_outcomes, rerun_removed
from app.refinterp import interpret
from app.runtime import (
    UNDEFINED,
    Builtins,
    Closure,
    Heap,
    Invoker,
    JSArray,
    arith,
    array_write,
    call,
    display,
    int32_op,
    tag_of,
)
from app.shapes import ShapeTable
from app.stats import LADDER, StatsReport, proportion, report, to_csv
from app.typesys import (
    BASIC_TAGS,
    CLOSURE,
    EMPTY,
    FLOAT64,
    INT32,
    NULL,
    OBJECT,
    STRING,
    UNKNOWN,
    TypeContext,
    closure_known,
    join,
    leq,
    refine,
)
from config import Config

F_SOURCE = """
function f(n) {
    if (n == 0)
        return 0;
    else
        return n + f(n-1);
}

print(f(%d));
"""


def lowered(name: str):
    return lower(parse_source(corpus.load(name)))


def flipped_outcomes(program, limits=None, *, name="<program>"):
    """Recorded outcomes with one constant tag test turned around."""
    table, run = record_outcomes(program, limits, name=name)
    key, outcome = next(iter(table.constant_sites().items()))
    table[key] = SiteOutcome(saw_true=not outcome, saw_false=outcome, exec_count=1)
    return table, run


def continuations(vm: VM) -> list:
    """Continuations of every compiled call in a VM."""
    versions = [v for table in vm.versions.values() for v in table.values()]
    versions += vm.generic.values()
    versions += [e.version for e in vm.generic_entries.values()]
    versions += [e.version for table in vm.entries.values() for e in table.values()]
    return [
        v.exit.extra.cont
        for v in versions
        if v.exit is not None and isinstance(v.exit.extra, CallSite)
    ]


class RecordingInvoker(Invoker):
    """Engine stand-in that records the calls it is asked to run."""

    def __init__(self, arity: int) -> None:
        self.builtins = Builtins()
        self.declared = arity
        self.calls = []

    def arity(self, callee):
        return self.declared

    def invoke(self, callee, this, args):
        self.calls.append((callee, this, args))
        return len(args)


class TestConfig(Config):
    TESTING = True
    BBV_VALIDATE = True


class AppCase(unittest.TestCase):
    """Base case with an application context."""

    def setUp(self):
        """Create the app context."""
        self.app = create_app(TestConfig)
        self.app_context = self.app.app_context()
        self.app_context.push()

    def tearDown(self):
        """Remove the app context."""
        self.app_context.pop()


class FrontendCase(unittest.TestCase):
    """Tests for the lexer, parser and unparser."""

    def test_tokens_of_recursive_function(self):
        """Check that f, n and `==` each appear once per occurrence."""
        tokens = tokenize(F_SOURCE % 10)
        values = [t.value for t in tokens]
        self.assertEqual(values.count("f"), 3)
        self.assertEqual(values.count("n"), 4)
        self.assertEqual(values.count("=="), 1)
        self.assertEqual(tokens[-1].kind, "eof")

    def test_parse_shape(self):
        """Check the declaration and the condition of the if statement."""
        ast = parse_source(F_SOURCE % 10)
        decl = ast.children[0]
        self.assertEqual(decl.kind, "FunctionDecl")
        self.assertEqual(decl.value, ("f", ("n",)))
        cond = decl.children[0].children[0].children[0]
        self.assertEqual(cond.kind, "BinOp")
        self.assertEqual(cond.value, "==")
        self.assertEqual([c.kind for c in cond.children], ["Ident", "IntLit"])

    def test_named_function_expressions(self):
        """Check that both accumulator methods parse as function expressions."""
        ast = parse_source(corpus.load("accum"))
        body = ast.children[0].children[0].children
        writes = [s.children[0] for s in body if s.kind == "ExprStmt"]
        self.assertEqual([w.value for w in writes], ["n", "add", "sub"])
        self.assertEqual(writes[1].children[1].kind, "FunctionExpr")
        self.assertEqual(writes[1].children[1].value[0], "id1")
        self.assertEqual(writes[2].children[1].value[0], "id2")

    def test_round_trip(self):
        """Check that unparsing and parsing again gives the same tree."""
        for name in corpus.program_names():
            with self.subTest(program=name):
                ast = parse_source(corpus.load(name))
                self.assertEqual(unparse(parse_source(unparse(ast))), unparse(ast))

    def test_errors_carry_positions(self):
        """Check that lex and parse errors point at the offending place."""
        with self.assertRaises(ParseError) as cm:
            parse_source("var x = 1\nvar y = 2;")
        self.assertEqual(cm.exception.line, 2)
        self.assertEqual(cm.exception.expected, ("';'",))
        with self.assertRaises(LexError) as cm:
            tokenize('var s = "abc;')
        self.assertEqual((cm.exception.line, cm.exception.column), (1, 9))
        with self.assertRaises(LexError):
            tokenize("var x = 1 # 2;")

    def test_numeric_literal_ranges(self):
        """Check which literals stay int32 and which become float64."""
        tokens = tokenize("var x = 1e999;")
        self.assertEqual(tokens[3].kind, "float")
        self.assertEqual(tokens[3].value, math.inf)
        self.assertEqual(tokenize("2147483648;")[0].kind, "float")
        self.assertEqual(tokenize("2147483647;")[0].kind, "int")
        for source, kind, value in (
            ("var y = -2147483648;", "IntLit", -(2**31)),
            ("var y = - 2147483648;", "IntLit", -(2**31)),
            ("var y = -2147483649;", "FloatLit", -2147483649.0),
            ("var y = -2147483648.0;", "FloatLit", -2147483648.0),
            ("var y = 2147483648;", "FloatLit", 2147483648.0),
        ):
            with self.subTest(source=source):
                literal = parse_source(source).children[0].children[0]
                self.assertEqual((literal.kind, literal.value), (kind, value))
        self.assertEqual(interpret(parse_source("print(-2147483648 - 1);")).output, ["-2147483649"])


class TypeSystemCase(unittest.TestCase):
    """Tests for tags and type contexts."""

    def test_lattice(self):
        """Check the order and joins of the tag lattice."""
        self.assertTrue(leq(INT32, UNKNOWN))
        self.assertTrue(leq(closure_known(3), CLOSURE))
        self.assertFalse(leq(INT32, FLOAT64))
        self.assertEqual(join(INT32, INT32), INT32)
        self.assertEqual(join(INT32, FLOAT64), UNKNOWN)
        self.assertEqual(join(closure_known(1), closure_known(2)), CLOSURE)
        self.assertEqual(closure_known(2).name, "closure/id2")
        self.assertEqual(closure_known("print").name, "closure/print")

    def test_join_laws(self):
        """Check that join is a commutative, associative, idempotent bound under unknown."""
        tags = BASIC_TAGS + (closure_known(1), closure_known(2), closure_known("print"))
        for a in tags:
            self.assertEqual(join(a, a), a)
            self.assertEqual(join(a, UNKNOWN), UNKNOWN)
            self.assertTrue(leq(a, UNKNOWN))
            for b in tags:
                self.assertEqual(join(a, b), join(b, a))
                self.assertEqual(leq(a, b), join(a, b) == b, (a, b))
                for c in tags:
                    self.assertEqual(join(join(a, b), c), join(a, join(b, c)), (a, b, c))

    def test_random_context_keys_are_distinct(self):
        """Check that 1000 random contexts never share a key unless equal."""
        rng = random.Random(11)
        tags = [t for t in BASIC_TAGS if t != UNKNOWN] + [closure_known(1), closure_known("print")]
        seen = {}
        for _ in range(1000):
            ctx = EMPTY
            for value in rng.sample(range(8), rng.randint(0, 5)):
                ctx = ctx.assign(value, rng.choice(tags), rng.choice((None, 0, 1, 12)))
            entries = dict(ctx.items())
            self.assertEqual(seen.setdefault(ctx.key, entries), entries)
        self.assertGreater(len(seen), 500)

    def test_refine(self):
        """Check that refinement narrows and rejects disjoint tags."""
        ctx = refine(EMPTY, 1, CLOSURE)
        ctx = refine(ctx, 1, closure_known(4))
        self.assertEqual(ctx.tag(1), closure_known(4))
        self.assertIs(refine(ctx, 1, UNKNOWN), ctx)
        with self.assertRaises(RefineConflict):
            refine(refine(EMPTY, 2, INT32), 2, NULL)
        with self.assertRaises(RefineConflict):
            refine(EMPTY, 2, UNKNOWN, shape=3)

    def test_context_keys(self):
        """Check that keys ignore insertion order and restriction drops dead values."""
        a = EMPTY.assign(1, INT32).assign(2, OBJECT, shape=3)
        b = EMPTY.assign(2, OBJECT, shape=3).assign(1, INT32)
        self.assertEqual(a.key, b.key)
        self.assertEqual(a, b)
        self.assertEqual(a.restrict([2]), TypeContext({2: a[2]}))
        self.assertIsNone(a.without_shapes().shape(2))
        self.assertEqual(a.without_shapes(keep=2).shape(2), 3)
        self.assertNotIn(1, a.assign(1, UNKNOWN))


class ShapesCase(unittest.TestCase):
    """Tests for the typed shape transition tree."""

    def test_define_and_intern(self):
        """Check that equal transitions share a shape and slots are ordered."""
        table = ShapeTable()
        s1 = table.define_property(table.root, "n", INT32)
        self.assertEqual(s1.layout, {"n": (0, INT32)})
        self.assertIs(table.define_property(table.root, "n", INT32), s1)
        s2 = table.define_property(s1, "add", closure_known(2))
        self.assertEqual(table.lookup(s2, "add"), (1, closure_known(2)))
        self.assertIsNone(table.lookup(s2, "sub"))
        with self.assertRaises(DuplicateProperty):
            table.define_property(s2, "n", FLOAT64)

    def test_update_property_type(self):
        """Check that retyping keeps the layout and changes one tag."""
        table = ShapeTable()
        s = table.define_property(table.root, "add", closure_known(1))
        s = table.define_property(s, "sub", closure_known(2))
        t = table.update_property_type(s, "add", closure_known(2))
        self.assertIsNot(t, s)
        self.assertEqual(t.layout, {"add": (0, closure_known(2)), "sub": (1, closure_known(2))})
        self.assertIs(table.update_property_type(s, "add", closure_known(1)), s)
        with self.assertRaises(MissingProperty):
            table.update_property_type(s, "mul", INT32)

    def test_lookup_matches_layout_model(self):
        """Check lookups and slots over random definitions and retypings."""
        rng = random.Random(5)
        names = ("a", "b", "c", "d", "e")
        tags = (INT32, FLOAT64, NULL, STRING, OBJECT)
        table = ShapeTable()
        shape, model = table.root, {}
        for step in range(300):
            if step % 25 == 0:
                shape, model = table.root, {}
            name, tag = rng.choice(names), rng.choice(tags)
            if name in model:
                slots = {n: slot for n, (slot, _) in shape.layout.items()}
                shape = table.update_property_type(shape, name, tag)
                self.assertEqual({n: slot for n, (slot, _) in shape.layout.items()}, slots)
                model[name] = (model[name][0], tag)
            else:
                shape = table.define_property(shape, name, tag)
                model[name] = (len(model), tag)
            self.assertEqual(shape.layout, model)
            for other in names:
                self.assertEqual(table.lookup(shape, other), model.get(other))
        self.assertGreater(table.retype_count, 0)

    def test_tree_sum_shapes(self):
        """Check that tree-sum creates exactly two node shapes."""
        run = execute(lowered("tree-sum"), "entry+cont")
        layouts = {
            tuple((name, tag.name) for name, (_, tag) in s.layout.items())
            for s in run.vm.heap.shapes.shapes
            if len(s.layout) == 3
        }
        self.assertEqual(
            layouts,
            {
                (("val", "int32"), ("left", "null"), ("right", "null")),
                (("val", "int32"), ("left", "object"), ("right", "object")),
            },
        )


class RuntimeCase(unittest.TestCase):
    """Tests for value helpers."""

    def test_int32_arithmetic(self):
        """Check overflow and inexact division fall out of int32."""
        self.assertEqual(int32_op("AddI32", 2, 3), 5)
        self.assertIsNone(int32_op("AddI32", 2**31 - 1, 1))
        self.assertEqual(int32_op("DivI32", 6, 3), 2)
        self.assertIsNone(int32_op("DivI32", 7, 2))
        self.assertIsNone(int32_op("DivI32", 7, 0))
        self.assertIsNone(int32_op("NegI32", -(2**31), 0))

    def test_display(self):
        """Check how values are printed."""
        self.assertEqual(display(2.5), "2.5")
        self.assertEqual(display(4.0), "4")
        self.assertEqual(display(None), "null")
        self.assertEqual(display(True), "true")
        self.assertEqual(display(JSArray([1, 2])), "1,2")
        self.assertEqual(display(float("inf")), "Infinity")

    def test_array_write(self):
        """Check that writes may append at the end but not beyond it."""
        arr = JSArray([1])
        array_write(arr, 1, 2)
        self.assertEqual(arr.elems, [1, 2])
        with self.assertRaises(Halt):
            array_write(arr, 5, 3)

    def test_set_prop_retypes_in_place(self):
        """Check that storing a float64 into an int32 property retypes the shape."""
        heap = Heap()
        obj = heap.alloc_object()
        heap.set_prop(obj, "n", 1)
        self.assertEqual(obj.shape.layout, {"n": (0, INT32)})
        heap.set_prop(obj, "n", 1.5)
        self.assertEqual(obj.shape.layout, {"n": (0, FLOAT64)})
        self.assertEqual(obj.slots, [1.5])
        self.assertEqual(heap.shapes.retype_count, 1)
        self.assertEqual(heap.check_object(obj), [])

        source = "function P(n) { this.n = n; }\nvar p = new P(1);\np.n = 1.5;\nprint(p.n);\n"
        run = execute(lower(parse_source(source)), "shapes", Limits(validate=True))
        self.assertEqual(run.output, ["1.5"])
        self.assertEqual(run.report.shapeRetypes, 1)
        self.assertEqual(run.report.as_dict()["shapeRetypes"], 1)

    def test_arith_overflow_promotes(self):
        """Check that an overflowing int32 addition yields a float64."""
        result = arith("AddI32", 2_000_000_000, 2_000_000_000)
        self.assertEqual(result, 4e9)
        self.assertEqual(tag_of(result), FLOAT64)
        self.assertEqual(tag_of(arith("AddI32", 2, 3)), INT32)

    def test_call(self):
        """Check callee validation, arity padding and builtin calls."""
        via = RecordingInvoker(arity=3)
        self.assertEqual(call(Closure(1), None, [7], via), 3)
        self.assertEqual(via.calls[0][2], [7, UNDEFINED, UNDEFINED])
        call(Closure(1), None, [1, 2, 3, 4], via)
        self.assertEqual(via.calls[1][2], [1, 2, 3])
        with self.assertRaises(NotCallable):
            call(5, None, [], via)
        call(Closure("print"), UNDEFINED, ["hi"], via)
        self.assertEqual(via.builtins.lines, ["hi"])
        self.assertEqual(len(via.calls), 2)
        run = execute(lower(parse_source("function g(a, b) { return b; }\nprint(g(1));")), "entry+cont")
        self.assertEqual(run.output, ["undefined"])
        with self.assertRaises(NotCallable):
            execute(lower(parse_source("var x = 3;\nx();")), "baseline")


class LoweringCase(unittest.TestCase):
    """Tests for IR lowering."""

    def test_recursive_function_tag_tests(self):
        """Check that f has four tag-test sites shared by their cascades."""
        program = lower(parse_source(F_SOURCE % 10))
        fn = program.function_named("f")
        self.assertEqual(len(fn.tag_test_sites()), 4)
        tests = [b.term for b in fn.blocks if isinstance(b.term, TagTest)]
        self.assertGreater(len(tests), 4)
        self.assertEqual({t.site for t in tests}, set(fn.tag_test_sites()))

    def test_verify_reports_use_before_definition(self):
        """Check that reading a register no path defines is a violation."""
        block = BasicBlock(0, 1, [Instr("Move", 2, (3,))], Return(2))
        fn = FunctionIR(1, "g", (), [block], 0, 4)
        self.assertEqual(verify(fn), ["b0: use of r3 before definition"])
        block.instrs.insert(0, Instr("ConstInt", 3, (), 1))
        self.assertEqual(verify(fn), [])

    def test_corpus_verifies(self):
        """Check that every lowered corpus function is well formed."""
        for name in corpus.program_names():
            program = lowered(name)
            for fn in program.functions.values():
                with self.subTest(program=name, function=fn.name):
                    self.assertEqual(verify(fn), [])

    def test_unresolved_identifier(self):
        """Check that an unknown name is rejected at lowering time."""
        with self.assertRaises(LowerError):
            lower(parse_source("function g() { return y; }\nprint(g());"))

    def test_outer_locals_are_not_captured(self):
        """Check that a nested function cannot read its parent's locals."""
        source = "function g(a) { var h = function () { return a; }; return h(); }\nprint(g(1));"
        with self.assertRaises(LowerError):
            lower(parse_source(source))


class VersioningCase(unittest.TestCase):
    """Tests for the versioning engine across modes."""

    def test_tree_sum_in_every_mode(self):
        """Check that tree-sum computes 502 in all six modes."""
        for mode in LADDER + ("oracle",):
            with self.subTest(mode=mode):
                run = execute(lowered("tree-sum"), mode, Limits(validate=True))
                self.assertEqual(run.output, ["502"])

    def test_recursive_function_counts(self):
        """Check the tag-test counts of f across the ladder."""
        for n in (10, 100, 1000):
            with self.subTest(n=n):
                program = lower(parse_source(F_SOURCE % n))
                counts = {mode: execute(program, mode).report.dynTagTests for mode in LADDER}
                self.assertEqual(counts["baseline"], 4 * n + 1)
                self.assertEqual(counts["intra"], 2 * n + 1)
                self.assertEqual(counts["entry"], n)
                self.assertEqual(counts["entry+cont"], 0)
                self.assertEqual(execute(program, "entry+cont").output, [str(n * (n + 1) // 2)])

    def test_reference_counts_match_baseline(self):
        """Check that the reference interpreter counts like the baseline."""
        for name in corpus.program_names():
            with self.subTest(program=name):
                ast = parse_source(corpus.load(name))
                expected = interpret(ast)
                run = execute(lower(ast), "baseline")
                self.assertEqual(run.output, expected.output)
                self.assertEqual(run.report.dynTagTests, expected.implicit_tests)

    def test_tree_sum_entry_points(self):
        """Check that sum gets one null and one object entry point."""
        program = lowered("tree-sum")
        run = execute(program, "entry+cont")
        vm = run.vm
        fn = program.function_named("sum")
        entries = list(vm.entries[fn.fid].values())
        self.assertEqual(len(entries), 2)
        tree = fn.param_regs[0]
        by_tag = {e.ctx.tag(tree): e for e in entries}
        self.assertEqual(set(by_tag), {NULL, OBJECT})
        self.assertEqual(vm.specialized_tests(by_tag[OBJECT]), {"tagTests": 0, "shapeTests": 2})
        listing = vm.dump_versions()
        self.assertIn("function sum", listing)
        self.assertIn("{tree: object} tag-tests=0 shape-tests=2", listing)
        # The top-level call passes an untyped global and enters generically.
        self.assertIn(fn.fid, vm.generic_entries)
        section = listing.split(f"function sum #{fn.fid}\n")[1].split("\nfunction ")[0]
        entry_lines = [line for line in section.splitlines() if line.startswith("  entry ")]
        self.assertEqual(len(entry_lines), 3)
        self.assertEqual(sum(line.startswith("  entry generic {}") for line in entry_lines), 1)

    def test_mode_ladder_is_monotone(self):
        """Check that no step of the ladder adds tag tests."""
        for name in corpus.program_names():
            program = lowered(name)
            counts = [execute(program, mode).report.dynTagTests for mode in LADDER]
            with self.subTest(program=name, counts=counts):
                self.assertEqual(counts, sorted(counts, reverse=True))
        for name in ("tree-sum", "f"):
            program = lowered(name)
            base, intra, _, entry, cont = (execute(program, m).report.dynTagTests for m in LADDER)
            self.assertLess(intra, base)
            self.assertLess(cont, entry)

    def test_beats_oracle_on_tree_sum(self):
        """Check that entry+cont keeps fewer tests than the perfect analysis."""
        program = lowered("tree-sum")
        oracle = execute(program, "oracle").report.dynTagTests
        cont = execute(program, "entry+cont").report.dynTagTests
        self.assertGreaterEqual(oracle, 511)
        self.assertLess(cont, oracle)

    def test_return_type_invalidation(self):
        """Check that a contradicted return type invalidates continuations soundly."""
        run = execute(lowered("mixed-return"), "entry+cont", Limits(validate=True))
        self.assertEqual(run.output, ["0", "2", "4", "6", "8", "done"])
        self.assertGreaterEqual(run.report.continuationsInvalidated, 1)
        self.assertGreaterEqual(run.report.functionsCausingInvalidation, 1)
        self.assertEqual(run.report.unseenContinuations, 0)

    def test_version_cap(self):
        """Check that a block fed eight contexts stops at the version limit."""
        program = lowered("megamorphic")
        run = execute(program, "intra", Limits(maxvers=5, validate=True))
        self.assertEqual(
            run.output,
            ["1", "2.5", "s", "null", "true", "1", "[object Object]", "function"],
        )
        fn = program.function_named("classify")
        capped = []
        for block in fn.blocks:
            versions, generic = run.vm.block_versions(block.block_id)
            self.assertLessEqual(len(versions), 5)
            if len(versions) == 5 and generic is not None:
                capped.append(block.block_id)
        self.assertGreaterEqual(len(capped), 1)

    def test_budget_and_depth_limits(self):
        """Check that runaway programs halt with the matching kind."""
        spin = lower(parse_source("var i = 0;\nwhile (true) { i = i + 1; }"))
        with self.assertRaises(Halt) as cm:
            execute(spin, "entry+cont", Limits(instr_budget=1000))
        self.assertEqual(cm.exception.kind, "budget-exceeded")
        self.assertIsInstance(cm.exception.report, StatsReport)
        deep = lower(parse_source("function r(n) { return r(n + 1); }\nr(0);"))
        with self.assertRaises(Halt) as cm:
            execute(deep, "baseline", Limits(max_call_depth=50))
        self.assertEqual(cm.exception.kind, "stack-overflow")

    def test_call_global_reuses_versions(self):
        """Check that calling benchmarkRun again compiles nothing new."""
        vm = VM(lowered("fib"), "entry+cont")
        first = run_vm(vm)
        self.assertEqual(first.output, ["610"])
        compiled = vm.stats.compileEvents
        self.assertEqual(vm.call_global("benchmarkRun"), 610)
        self.assertEqual(vm.stats.compileEvents, compiled)

    def test_entry_cap_falls_back_to_generic(self):
        """Check that calls beyond the entry point limit use the generic entry."""
        source = "function same(x) { return x; }\n" + "".join(
            f"print(same({arg}));\n" for arg in ("1", "2.5", '"s"', "null")
        )
        program = lower(parse_source(source))
        fid = program.function_named("same").fid
        capped = execute(program, "entry+cont", Limits(maxentries=1, validate=True))
        self.assertEqual(capped.output, ["1", "2.5", "s", "null"])
        self.assertEqual(len(capped.vm.entries[fid]), 1)
        self.assertIn(fid, capped.vm.generic_entries)
        self.assertGreaterEqual(capped.report.entryFallbacks, 3)
        uncapped = execute(program, "entry+cont", Limits(validate=True))
        self.assertEqual(uncapped.output, capped.output)
        self.assertEqual(len(uncapped.vm.entries[fid]), 4)
        self.assertEqual(uncapped.report.entryFallbacks, 0)

    def test_unknown_callee_uses_generic_entry(self):
        """Check that a callee of unknown identity is entered generically."""
        source = "\n".join(
            [
                "function a(x) { return x + 1; }",
                "function b(x) { return x + 2; }",
                "var fs = [a, b];",
                "var t = 0;",
                "var i = 0;",
                "while (i < 2) { var g = fs[i]; t = t + g(i); i = i + 1; }",
                "print(t);",
            ]
        )
        program = lower(parse_source(source))
        run = execute(program, "entry+cont", Limits(validate=True))
        self.assertEqual(run.output, ["4"])
        for name in ("a", "b"):
            fid = program.function_named(name).fid
            self.assertIn(fid, run.vm.generic_entries)
            self.assertFalse(run.vm.entries.get(fid))
        self.assertLess(run.report.knownCalleeCalls, run.report.totalCalls)

    def test_invalidation_without_dependents(self):
        """Check that contradicting a return type nobody relies on changes nothing."""
        program = lowered("f")
        vm = VM(program, "entry+cont")
        fid = program.function_named("f").fid
        vm.invalidate_continuations(fid, [])
        vm.record_return_type(fid, INT32)
        vm.record_return_type(fid, STRING)
        self.assertEqual(vm.return_types[fid].state, "unknown")
        self.assertEqual(vm.stats.continuationsInvalidated, 0)
        self.assertEqual(vm.finish().functionsCausingInvalidation, 0)

    def test_invalidated_continuations_settle(self):
        """Check that each continuation is invalidated at most once."""
        program = lowered("mixed-return")
        run = execute(program, "entry+cont", Limits(validate=True), name="mixed-return")
        conts = continuations(run.vm)
        invalidated = [c for c in conts if c.invalidated]
        self.assertGreaterEqual(len(invalidated), 1)
        self.assertEqual(len(invalidated), run.report.continuationsInvalidated)
        for cont in invalidated:
            if cont.version is not None:
                self.assertIsNone(cont.assumed)
        memo = run.vm.return_types[program.function_named("pick").fid]
        self.assertEqual(memo.state, "unknown")
        self.assertEqual(memo.dependents, [])
        self.assertEqual(run.report.functionsCausingInvalidation, 1)
        baseline = execute(program, "baseline", name="mixed-return").report
        row = report([baseline, run.report])["programs"]["mixed-return"]["entry+cont"]
        self.assertEqual(run.report.functionsCompiled, 1)
        self.assertEqual(row["invalidatingFunctionRate"], 1.0)

    def test_unknown_return_type(self):
        """Check that a function returning an untyped value leaves callers generic."""
        source = "function g(a) { return a; }\nvar xs = [1];\nprint(g(xs[0]) + 1);"
        program = lower(parse_source(source))
        run = execute(program, "entry+cont", Limits(validate=True))
        self.assertEqual(run.output, ["2"])
        self.assertEqual(run.vm.return_types[program.function_named("g").fid].state, "unknown")
        self.assertEqual(run.report.totalReturns, 1)
        self.assertEqual(run.report.returnTagKnownDynamic, 0)
        self.assertEqual(run.report.continuationsInvalidated, 0)

    def test_single_version_limit(self):
        """Check that one version per block still computes every corpus result."""
        for name in corpus.program_names():
            with self.subTest(program=name):
                ast = parse_source(corpus.load(name))
                run = execute(lower(ast), "entry+cont", Limits(maxvers=1, validate=True))
                self.assertEqual(run.output, interpret(ast).output)


class OracleCase(unittest.TestCase):
    """Tests for the simulated perfect analysis."""

    def test_constant_sites_are_removed(self):
        """Check that only polymorphic sites remain counted."""
        program = lowered("tree-sum")
        table, baseline = record_outcomes(program)
        self.assertEqual(sum(o.exec_count for o in table.values()), baseline.report.dynTagTests)
        run = rerun_removed(program, table)
        self.assertEqual(run.output, ["502"])
        kept = sum(table[site].exec_count for site in table.polymorphic_sites())
        self.assertEqual(run.report.dynTagTests, kept)

    def test_outcomes_are_kept_per_tested_tag(self):
        """Check that one operand occurrence tallies each tag of its cascade apart."""
        program = lowered("tree-sum")
        table, _ = record_outcomes(program)
        sites = {site for site, _ in table}
        self.assertLess(len(sites), len(table))
        tags_by_site = {}
        for site, tag in table:
            tags_by_site.setdefault(site, set()).add(tag)
        self.assertTrue(any({INT32, FLOAT64, STRING} <= tags for tags in tags_by_site.values()))

    def test_flipped_site_is_detected(self):
        """Check that a removed site producing the other outcome is an error."""
        program = lowered("f")
        table, _ = record_outcomes(program)
        site, outcome = next(iter(table.constant_sites().items()))
        table[site] = SiteOutcome(saw_true=not outcome, saw_false=outcome, exec_count=1)
        with self.assertRaises(DeterminismViolation):
            rerun_removed(program, table)


class StatsCase(unittest.TestCase):
    """Tests for the comparison report."""

    def test_proportion(self):
        """Check proportions, including the empty baseline."""
        self.assertEqual(proportion(5, 10), 0.5)
        self.assertEqual(proportion(0, 0), 1.0)

    def test_report(self):
        """Check the document built from runs of one program."""
        runs = [
            StatsReport(program="p", mode="baseline", dynTagTests=40),
            StatsReport(program="p", mode="intra", dynTagTests=10, emittedInstrCount=100, compileSeconds=0.5),
            StatsReport(
                program="p",
                mode="entry+cont",
                emittedInstrCount=150,
                compileSeconds=0.25,
                functionsCompiled=4,
                functionsCausingInvalidation=1,
            ),
        ]
        document = report(runs)
        self.assertEqual(document["schema_version"], 1)
        rows = document["programs"]["p"]
        self.assertEqual(rows["intra"]["proportion"], 0.25)
        self.assertEqual(rows["baseline"]["proportion"], 1.0)
        self.assertEqual(rows["entry+cont"]["codeSizeVsIntra"], 1.5)
        self.assertEqual(rows["entry+cont"]["compileTimeVsIntra"], 0.5)
        self.assertEqual(rows["entry+cont"]["invalidatingFunctionRate"], 0.25)
        self.assertIsNone(rows["intra"]["invalidatingFunctionRate"])
        self.assertAlmostEqual(document["geomean"]["intra"], 0.25)
        self.assertAlmostEqual(document["relative"]["entry+cont"]["codeSizeVsIntra"], 1.5)
        lines = to_csv(document).splitlines()
        self.assertEqual(
            lines[0],
            "program,mode,dynTagTests,proportion,dynShapeTests,dynInstrs,"
            "invalidatingFunctionRate,codeSizeVsIntra,compileTimeVsIntra",
        )
        self.assertIn("p,intra,10,0.250000,0,0,,1.000000,1.000000", lines)
        self.assertIn("p,entry+cont,0,0.000000,0,0,0.250000,1.500000,0.500000", lines)
        self.assertIn("geomean,entry+cont,,0.000100,,,0.250000,1.500000,0.500000", lines)

    def test_missing_baseline(self):
        """Check that a report without a baseline run is refused."""
        with self.assertRaises(MissingBaseline):
            report([])
        with self.assertRaises(MissingBaseline) as cm:
            report([StatsReport(program="q", mode="entry")])
        self.assertEqual(cm.exception.program, "q")


class FuzzCase(unittest.TestCase):
    """Differential tests against the reference interpreter."""

    def test_generator_is_deterministic(self):
        """Check that one seed always gives the same program."""
        self.assertEqual(ProgramGenerator(7).generate(), ProgramGenerator(7).generate())
        self.assertNotEqual(ProgramGenerator(7).generate(), ProgramGenerator(8).generate())

    def test_corpus_differential(self):
        """Check every corpus program against the reference interpreter."""
        for name in corpus.program_names():
            with self.subTest(program=name):
                outcome = differential(corpus.load(name).source)
                self.assertEqual(outcome.mismatches, [])

    def test_generated_programs(self):
        """Check 500 generated programs in every mode of the ladder."""
        for outcome in fuzz(seed=0, count=500):
            with self.subTest(seed=outcome.seed):
                self.assertEqual(outcome.mismatches, [], outcome.source)


class CliCase(AppCase):
    """Tests for the vm command group."""

    def setUp(self):
        """Create the app context and a CLI runner."""
        super().setUp()
        self.runner = self.app.test_cli_runner()

    def test_run(self):
        """Check that a corpus program runs and writes its statistics."""
        with tempfile.TemporaryDirectory() as tmp:
            stats = Path(tmp) / "s.json"
            result = self.runner.invoke(args=["vm", "run", "f", "--mode", "baseline", "--stats", str(stats)])
            self.assertEqual(result.exit_code, 0, result.output)
            self.assertIn("5050", result.output)
            document = json.loads(stats.read_text())
        self.assertEqual(document["schema_version"], 1)
        self.assertEqual(document["run"]["mode"], "baseline")
        self.assertEqual(document["run"]["dynTagTests"], 401)

    def test_flipped_oracle_site_exits_internal(self):
        """Check that a constant tag test changing outcome on replay is an internal failure."""
        with patch("app.oracle.record_outcomes", flipped_outcomes):
            result = self.runner.invoke(args=["vm", "run", "f", "--mode", "oracle"])
        self.assertEqual(result.exit_code, 3)
        self.assertIn("was constant", result.output)

    def test_run_dumps(self):
        """Check the version and shape listings."""
        result = self.runner.invoke(args=["vm", "run", "tree-sum", "--dump-versions", "--dump-shapes"])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("function sum", result.output)
        self.assertIn("S0 <root>", result.output)

    def test_exit_codes(self):
        """Check the status of missing programs, bad modes and halts."""
        result = self.runner.invoke(args=["vm", "run", "missing.js"])
        self.assertEqual(result.exit_code, 2)
        self.assertIn("no such program", result.output)
        result = self.runner.invoke(args=["vm", "run", "f", "--mode", "fastest"])
        self.assertEqual(result.exit_code, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "boom.js"
            path.write_text("print(1);\nthrow Error('boom');\n")
            result = self.runner.invoke(args=["vm", "run", str(path)])
            self.assertEqual(result.exit_code, 1)
            self.assertIn("boom", result.output)
            path.write_text("var x = ;\n")
            result = self.runner.invoke(args=["vm", "run", str(path)])
            self.assertEqual(result.exit_code, 2)

    def test_matrix(self):
        """Check the single-program, single-mode matrix and its CSV."""
        with tempfile.TemporaryDirectory() as tmp:
            csv_path = Path(tmp) / "m.csv"
            result = self.runner.invoke(args=["vm", "matrix", "f", "--mode", "baseline", "--csv", str(csv_path)])
            self.assertEqual(result.exit_code, 0, result.output)
            rows = csv_path.read_text().splitlines()
        self.assertTrue(rows[1].startswith("f,baseline,401,1.000000,0,"))
        self.assertEqual(rows[0].split(",")[-3:], ["invalidatingFunctionRate", "codeSizeVsIntra", "compileTimeVsIntra"])
        self.assertEqual(rows[-1], "geomean,baseline,,1.000000,,,0.000000,,")

    def test_bench(self):
        """Check the harness and the benchmark convention."""
        result = self.runner.invoke(args=["vm", "bench", "fib", "--warmup", "0", "--timing", "1"])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("samples=1", result.output)
        result = self.runner.invoke(args=["vm", "bench", "tree-sum"])
        self.assertEqual(result.exit_code, 2)
        self.assertIn("corpus convention violated", result.output)

    def test_fuzz(self):
        """Check a short fuzzing session."""
        result = self.runner.invoke(args=["vm", "fuzz", "--seed", "3", "--count", "5"])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("5 programs, 0 mismatches", result.output)


class ApiCase(AppCase):
    """Tests for the HTTP API."""

    def setUp(self):
        """Create the app context and a test client."""
        super().setUp()
        self.client = self.app.test_client()

    def test_corpus(self):
        """Check the list of shipped programs."""
        response = self.client.get("/api/corpus")
        self.assertEqual(response.status_code, 200)
        self.assertIn("tree-sum", response.get_json()["programs"])

    def test_run_program(self):
        """Check a corpus run and an inline run."""
        response = self.client.post("/api/runs", json={"program": "tree-sum", "mode": "entry+cont"})
        self.assertEqual(response.status_code, 200)
        data = response.get_json()
        self.assertEqual(data["output"], ["502"])
        self.assertEqual(data["stats"]["mode"], "entry+cont")
        response = self.client.post("/api/runs", json={"source": "print(6 * 7);", "mode": "baseline"})
        self.assertEqual(response.get_json()["output"], ["42"])

    def test_bad_requests(self):
        """Check that malformed requests get 400 responses."""
        for body in (
            {"program": "f"},
            {"program": "f", "mode": "fastest"},
            {"source": "var = ;", "mode": "intra"},
            {"program": "f", "mode": "intra", "maxvers": 0},
        ):
            with self.subTest(body=body):
                response = self.client.post("/api/runs", json=body)
                self.assertEqual(response.status_code, 400)
                self.assertEqual(response.get_json()["error"], "Bad Request")

    def test_halt(self):
        """Check that a halted run returns its partial statistics."""
        response = self.client.post(
            "/api/runs", json={"source": "print(1);\nthrow Error('boom');", "mode": "entry"}
        )
        self.assertEqual(response.status_code, 422)
        data = response.get_json()
        self.assertIn("boom", data["message"])
        self.assertEqual(data["output"], ["1"])
        self.assertEqual(data["stats"]["mode"], "entry")

    def test_flipped_oracle_site(self):
        """Check that a constant tag test changing outcome on replay is a server error."""
        with patch("app.oracle.record_outcomes", flipped_outcomes):
            response = self.client.post("/api/runs", json={"program": "f", "mode": "oracle"})
        self.assertEqual(response.status_code, 500)
        data = response.get_json()
        self.assertEqual(data["error"], "Internal Server Error")
        self.assertIn("was constant", data["message"])


if __name__ == "__main__":
    unittest.main(verbosity=2)
