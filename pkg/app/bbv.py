"""Lazy basic block versioning with entry point and continuation specialization.

Code generation and execution interleave on one thread: a block version is a
stub until control first reaches it, at which point it is specialized under its
entry context using what the context proves about each value; successor edges
are resolved the first time they are taken.
"""

import logging
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional

from app.exceptions import (
    BudgetExceeded,
    DeterminismViolation,
    Halt,
    InvariantViolation,
    StackOverflow,
)
from app.ir import (
    Branch,
    Call,
    FunctionIR,
    Jump,
    LoweredProgram,
    OverflowTest,
    Return,
    ShapeTest,
    TagTest,
    tag_matches,
)
from app.ir import Halt as HaltTerm
from app.runtime import (
    BUILTINS,
    UNDEFINED,
    Builtins,
    Closure,
    Heap,
    HeapObject,
    Invoker,
    JSArray,
    Value,
    array_read,
    array_write,
    call,
    check_callable,
    compare,
    display,
    f64_op,
    has_tag,
    int32_op,
    mod_i32,
    tag_of,
    truthy,
)
from app.stats import LADDER, StatsReport, StatsSink
from app.typesys import (
    ARRAY,
    CONST,
    EMPTY,
    FLOAT64,
    INT32,
    NULL,
    OBJECT,
    STRING,
    UNKNOWN,
    Entry,
    TypeContext,
    TypeTag,
    closure_known,
    refine,
)

logger = logging.getLogger(__name__)

MODES = LADDER + ("oracle",)


@dataclass(frozen=True)
class Features:
    """What a mode enables; each step of the ladder adds to the previous one."""

    versioning: bool
    shapes: bool
    entries: bool
    continuations: bool

    @classmethod
    def for_mode(cls, mode: str) -> "Features":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
        level = LADDER.index(mode) if mode in LADDER else 0
        return cls(level >= 1, level >= 2, level >= 3, level >= 4)


@dataclass(frozen=True)
class Limits:
    maxvers: int = 5
    maxentries: int = 5
    max_call_depth: int = 10_000
    instr_budget: int = 50_000_000
    entry_shapes: bool = False
    validate: bool = False

    @classmethod
    def from_config(cls, config) -> "Limits":
        """Engine limits from a Flask config mapping (or any mapping)."""
        return cls(
            maxvers=int(config.get("BBV_MAXVERS", 5)),
            maxentries=int(config.get("BBV_MAXENTRIES", 5)),
            max_call_depth=int(config.get("BBV_MAX_CALL_DEPTH", 10_000)),
            instr_budget=int(config.get("BBV_INSTR_BUDGET", 50_000_000)),
            entry_shapes=bool(config.get("BBV_ENTRY_SHAPES", False)),
            validate=bool(config.get("BBV_VALIDATE", False)),
        )


CONST_TAGS = {
    "ConstInt": INT32,
    "ConstFloat": FLOAT64,
    "ConstStr": STRING,
    "ConstBool": CONST,
    "ConstNull": NULL,
    "ConstUndef": CONST,
}
RESULT_TAGS = {
    "AllocArray": ARRAY,
    "ArrayLength": INT32,
    "StrLength": INT32,
    "ToBool": CONST,
    "Not": CONST,
    "I32toF64": FLOAT64,
    "AddF64": FLOAT64,
    "SubF64": FLOAT64,
    "MulF64": FLOAT64,
    "DivF64": FLOAT64,
    "ModF64": FLOAT64,
    "NegF64": FLOAT64,
    "ModI32": INT32,
    "CmpI32": CONST,
    "CmpF64": CONST,
    "StrEq": CONST,
    "RefEq": CONST,
    "StrConcat": STRING,
}
F64_OPS = frozenset({"AddF64", "SubF64", "MulF64", "DivF64", "ModF64", "NegF64"})

UNSEEN, KNOWN, UNKNOWN_STATE = "unseen", "known", "unknown"


class TypeMemo:
    """Memorized type of a function's returns or of a global.

    States move only toward `unknown`; dependents are kept while `known`.
    """

    __slots__ = ("state", "tag", "dependents")

    def __init__(self, tag: Optional[TypeTag] = None) -> None:
        self.state = KNOWN if tag is not None else UNSEEN
        self.tag = tag
        self.dependents: list = []

    def record(self, tag: TypeTag) -> Optional[list]:
        """Fold in a newly compiled observation.

        Returns:
            The dependents to invalidate when the observation contradicts a
            known type, else None.
        """
        if self.state == UNKNOWN_STATE:
            return None
        if tag != UNKNOWN and self.state == UNSEEN:
            self.state, self.tag = KNOWN, tag
            return None
        if tag != UNKNOWN and self.tag == tag:
            return None
        dependents, self.dependents = self.dependents, []
        self.state, self.tag = UNKNOWN_STATE, None
        return dependents

    def depend(self, dependent: Any) -> None:
        if dependent not in self.dependents:
            self.dependents.append(dependent)

    def __repr__(self) -> str:
        return f"known({self.tag.name})" if self.state == KNOWN else self.state


class BlockVersion:
    """One specialization of a block; `code is None` while it is a stub."""

    __slots__ = ("block", "ctx", "generic", "code", "exit", "number")

    def __init__(self, block, ctx: TypeContext, generic: bool, number: int) -> None:
        self.block = block
        self.ctx = ctx
        self.generic = generic
        self.code: Optional[list] = None
        self.exit = None
        self.number = number

    @property
    def key(self) -> tuple[int, bytes]:
        return self.block.block_id, self.ctx.key

    @property
    def is_stub(self) -> bool:
        return self.code is None

    def label(self) -> str:
        return f"b{self.block.block_id}/{'generic' if self.generic else f'v{self.number}'}"


class EntryPoint:
    """A function entry, owning the version of the entry block it starts with."""

    __slots__ = ("fid", "ctx", "generic", "version")

    def __init__(self, fid: int, version: BlockVersion) -> None:
        self.fid = fid
        self.ctx = version.ctx
        self.generic = version.generic
        self.version = version

    @property
    def is_stub(self) -> bool:
        return self.version.code is None


class Edge:
    __slots__ = ("block_id", "ctx", "version")

    def __init__(self, block_id: int, ctx: TypeContext) -> None:
        self.block_id = block_id
        self.ctx = ctx
        self.version: Optional[BlockVersion] = None


class Continuation:
    """Code after one call site of one version, compiled on first return."""

    __slots__ = ("site", "block_id", "dst", "base", "callee", "builtin", "assumed", "version", "invalidated")

    def __init__(self, site, block_id, dst, base, callee, builtin) -> None:
        self.site = site
        self.block_id = block_id
        self.dst = dst
        self.base: TypeContext = base
        self.callee: Optional[int] = callee
        self.builtin = builtin
        self.assumed: Optional[TypeTag] = None
        self.version: Optional[BlockVersion] = None
        self.invalidated = False


JUMP, TEST, SHAPES, SHAPE_DYN, OVERFLOW, BRANCH, CALL, RETURN, HALT = range(9)


class Exit:
    """Compiled terminator of a version."""

    __slots__ = ("kind", "value", "tag", "site", "edges", "op", "dst", "args", "extra")

    def __init__(self, kind: int, *, value=None, tag=None, site=None, edges=(), op=None, dst=None, args=(), extra=None):
        self.kind = kind
        self.value = value
        self.tag = tag
        self.site = site
        self.edges = list(edges)
        self.op = op
        self.dst = dst
        self.args = args
        self.extra = extra


@dataclass
class ShapeCascade:
    """Lazily grown chain of shape tests at one property access."""

    block_id: int
    ctx: TypeContext
    arms: list  # of (Shape, Edge)
    fallback: Optional[Edge] = None


@dataclass
class CallSite:
    callee_fid: Any
    entry: Optional[EntryPoint]
    builtin: Any
    cont: Continuation
    construct: bool


class Frame:
    __slots__ = ("fid", "regs", "cont")

    def __init__(self, fid: int, regs: list, cont: Optional[Continuation]) -> None:
        self.fid = fid
        self.regs = regs
        self.cont = cont


@dataclass
class RunResult:
    result: Value
    report: StatsReport
    output: list[str]
    vm: "VM"

    @property
    def display(self) -> str:
        return display(self.result)


class VM(Invoker):
    """One virtual machine instance: heap, versions, memos and statistics."""

    def __init__(
        self,
        program: LoweredProgram,
        mode: str = "entry+cont",
        limits: Optional[Limits] = None,
        *,
        name: str = "<program>",
        removed: Optional[dict] = None,
        output: Optional[Callable[[str], None]] = None,
    ) -> None:
        self.program = program
        self.mode = mode
        self.features = Features.for_mode(mode)
        self.limits = limits or Limits()
        self.removed = removed
        self.heap = Heap()
        self.builtins = Builtins(output)
        self.sink = StatsSink(name, mode)
        self.stats = self.sink.report
        self.versions: dict[int, dict[bytes, BlockVersion]] = {}
        self.generic: dict[int, BlockVersion] = {}
        self.entries: dict[int, dict[bytes, EntryPoint]] = {}
        self.generic_entries: dict[int, EntryPoint] = {}
        self.return_types: dict[int, TypeMemo] = {}
        self.global_types: dict[str, TypeMemo] = {}
        self.global_epoch = 0
        self.invalidating: set[int] = set()
        self.frames: list[Frame] = []
        for global_name in program.global_names:
            if global_name in BUILTINS:
                self.heap.globals[global_name] = Closure(global_name)
                self.global_types[global_name] = TypeMemo(closure_known(global_name))
            else:
                self.heap.globals[global_name] = UNDEFINED

    # Versions and entry points.

    def _generic_version(self, block_id: int) -> BlockVersion:
        version = self.generic.get(block_id)
        if version is None:
            version = BlockVersion(self.program.blocks[block_id], EMPTY, True, 0)
            self.generic[block_id] = version
            self.sink.record("generic_version")
            self.sink.record("compile")
        return version

    def request_block_version(self, block_id: int, ctx: TypeContext) -> BlockVersion:
        """The version of a block for a context: cached, new stub, or generic."""
        block = self.program.blocks[block_id]
        if not self.features.versioning:
            return self._generic_version(block_id)
        ctx = ctx.restrict(block.live_in)
        if not ctx:
            return self._generic_version(block_id)
        table = self.versions.setdefault(block_id, {})
        version = table.get(ctx.key)
        if version is not None:
            return version
        if len(table) >= self.limits.maxvers:
            logger.debug("b%d: version cap %d reached, using generic", block_id, self.limits.maxvers)
            return self._generic_version(block_id)
        version = BlockVersion(block, ctx, False, len(table) + 1)
        table[ctx.key] = version
        self.sink.record("compile")
        logger.debug("b%d: new version %s", block_id, ctx.describe())
        return version

    def generic_entry(self, fid: int) -> EntryPoint:
        entry = self.generic_entries.get(fid)
        if entry is None:
            fn = self.program.functions[fid]
            entry = EntryPoint(fid, BlockVersion(fn.entry, EMPTY, True, 0))
            self.generic_entries[fid] = entry
            self.sink.record("compile")
        return entry

    def request_entry_point(self, fid: int, arg_ctx: TypeContext) -> EntryPoint:
        """Entry point of a known callee for the argument context."""
        fn = self.program.functions[fid]
        ctx = arg_ctx.restrict(fn.entry.live_in)
        if not self.limits.entry_shapes:
            ctx = ctx.without_shapes()
        if not ctx:
            return self.generic_entry(fid)
        table = self.entries.setdefault(fid, {})
        entry = table.get(ctx.key)
        if entry is not None:
            return entry
        if len(table) >= self.limits.maxentries:
            self.sink.record("entry_fallback")
            logger.debug("%s: entry cap %d reached, using generic", fn.name, self.limits.maxentries)
            return self.generic_entry(fid)
        entry = EntryPoint(fid, BlockVersion(fn.entry, ctx, False, len(table) + 1))
        table[ctx.key] = entry
        self.sink.record("compile")
        logger.debug("%s: new entry point %s", fn.name, ctx.describe(fn.reg_names))
        return entry

    # Memorized types.

    def record_return_type(self, fid: int, tag: TypeTag) -> None:
        memo = self.return_types.setdefault(fid, TypeMemo())
        dependents = memo.record(tag)
        if dependents is not None:
            self.invalidate_continuations(fid, dependents)

    def invalidate_continuations(self, fid: int, dependents: list) -> None:
        """Turn every dependent continuation back into a stub."""
        if not dependents:
            return
        for cont in dependents:
            cont.version = None
            cont.assumed = None
            cont.invalidated = True
            self.sink.record("continuation_invalidated")
        self.invalidating.add(fid)
        logger.debug(
            "%s: return type contradicted, %d continuations invalidated",
            self.program.functions[fid].name,
            len(dependents),
        )

    def _record_global(self, name: str, tag: TypeTag) -> None:
        memo = self.global_types.setdefault(name, TypeMemo())
        dependents = memo.record(tag)
        if dependents is None:
            return
        self.global_epoch += 1
        for version in dependents:
            version.code = None
            version.exit = None
        if dependents:
            self.sink.record("global_invalidation")
            logger.debug("global %s: type contradicted, %d versions reset", name, len(dependents))

    def request_continuation(self, cont: Continuation) -> BlockVersion:
        """Compile a continuation under the callee's memorized return type."""
        tag = UNKNOWN
        if self.features.continuations:
            if cont.builtin is not None:
                tag = cont.builtin.result_tag
            elif cont.callee is not None and cont.dst is not None:
                memo = self.return_types.get(cont.callee)
                if memo is None or memo.state == UNSEEN:
                    self.sink.record("unseen_continuation")
                elif memo.state == KNOWN:
                    tag = memo.tag
                    memo.depend(cont)
        ctx = cont.base
        if cont.dst is not None:
            ctx = ctx.assign(cont.dst, tag)
        cont.assumed = tag if tag != UNKNOWN else None
        cont.version = self.request_block_version(cont.block_id, ctx)
        self.sink.record("continuation_compiled")
        return cont.version

    # Specialization.

    def specialize_block(self, version: BlockVersion) -> BlockVersion:
        """Compile a stub version under its entry context."""
        start = time.perf_counter()
        while True:
            epoch = self.global_epoch
            code, exit = self._walk(version)
            if epoch == self.global_epoch:
                break
        version.code = code
        version.exit = exit
        self.stats.compileSeconds += time.perf_counter() - start
        return version

    def _walk(self, version: BlockVersion) -> tuple[list, Exit]:
        block = version.block
        features = self.features
        tracking = features.versioning
        shapes = features.shapes
        table = self.heap.shapes
        ctx = version.ctx if tracking else EMPTY
        code: list = []
        self.sink.record("compile", amount=len(block.instrs) + 1)

        def define(ctx: TypeContext, reg: int, tag: TypeTag, shape=None) -> TypeContext:
            if not tracking:
                return ctx
            return ctx.assign(reg, tag, shape if shapes else None)

        for ins in block.instrs:
            op, dst, args = ins.op, ins.dst, ins.args
            if op in CONST_TAGS:
                if op == "ConstNull":
                    value = None
                elif op == "ConstUndef":
                    value = UNDEFINED
                else:
                    value = ins.imm
                code.append(("Const", dst, (), value))
                ctx = define(ctx, dst, CONST_TAGS[op])
            elif op == "Move":
                code.append(("Move", dst, args, None))
                if tracking:
                    src = ctx.get(args[0])
                    ctx = ctx.assign(dst, src.tag, src.shape) if src else ctx.forget(dst)
            elif op == "MakeClosure":
                code.append(("MakeClosure", dst, (), ins.imm))
                ctx = define(ctx, dst, closure_known(ins.imm))
            elif op == "GetGlobal":
                code.append(("GetGlobal", dst, (), ins.imm))
                tag = UNKNOWN
                if shapes:
                    memo = self.global_types.setdefault(ins.imm, TypeMemo())
                    if memo.state == KNOWN:
                        tag = memo.tag
                        memo.depend(version)
                ctx = define(ctx, dst, tag)
            elif op == "SetGlobal":
                code.append(("SetGlobal", None, args, ins.imm))
                if shapes:
                    self._record_global(ins.imm, ctx.tag(args[0]))
            elif op == "AllocObject":
                code.append(("AllocObject", dst, (), None))
                ctx = define(ctx, dst, OBJECT, table.root.shape_id)
            elif op in ("InitProp", "PutProp"):
                ctx = self._walk_store(ctx, code, ins, tracking, shapes)
            elif op == "GetProp":
                obj = args[0]
                sid = ctx.shape(obj) if shapes else None
                if sid is not None:
                    entry = table[sid].layout.get(ins.imm)
                    if entry is None:
                        code.append(("MissingProp", dst, args, ins.imm))
                        ctx = define(ctx, dst, UNKNOWN)
                    else:
                        code.append(("GetSlot", dst, args, entry[0]))
                        ctx = define(ctx, dst, entry[1])
                else:
                    code.append(("GetPropDyn", dst, args, ins.imm))
                    ctx = define(ctx, dst, UNKNOWN)
            elif op in F64_OPS:
                code.append(("F64", dst, args, op))
                ctx = define(ctx, dst, FLOAT64)
            elif op in ("CmpI32", "CmpF64", "StrEq"):
                code.append(("Cmp", dst, args, ins.imm))
                ctx = define(ctx, dst, CONST)
            elif op == "ArrayRead":
                code.append(("ArrayRead", dst, args, None))
                ctx = define(ctx, dst, UNKNOWN)
            elif op == "ArrayWrite":
                code.append(("ArrayWrite", None, args, None))
            else:
                code.append((op, dst, args, ins.imm))
                ctx = define(ctx, dst, RESULT_TAGS[op])

        return code, self._walk_terminator(version, block.term, ctx, tracking)

    def _walk_store(self, ctx, code, ins, tracking, shapes) -> TypeContext:
        obj, value = ins.args
        name = ins.imm
        sid = ctx.shape(obj) if shapes else None
        tag = ctx.tag(value)
        table = self.heap.shapes
        if sid is None or tag == UNKNOWN:
            code.append(("SetPropDyn", None, ins.args, name))
            return ctx.without_shapes() if tracking else ctx
        shape = table[sid]
        entry = shape.layout.get(name)
        if entry is not None and entry[1] == tag:
            code.append(("SetSlot", None, ins.args, entry[0]))
            return ctx
        if entry is not None:
            new = table.update_property_type(shape, name, tag)
            code.append(("Reshape", None, ins.args, (new, entry[0])))
        else:
            new = table.define_property(shape, name, tag)
            code.append(("AddSlot", None, ins.args, new))
        if ins.op == "PutProp":
            ctx = ctx.without_shapes(keep=obj)
        return ctx.assign(obj, OBJECT, new.shape_id)

    def _edge(self, block_id: int, ctx: TypeContext) -> Edge:
        return Edge(block_id, ctx)

    def _walk_terminator(self, version: BlockVersion, term, ctx: TypeContext, tracking: bool) -> Exit:
        features = self.features
        fid = version.block.fid
        if isinstance(term, Jump):
            return Exit(JUMP, edges=[self._edge(term.target, ctx)])
        if isinstance(term, TagTest):
            known = ctx.tag(term.value)
            if known != UNKNOWN:
                self.sink.record("static_eliminated")
                target = term.if_true if tag_matches(known, term.tag) else term.if_false
                return Exit(JUMP, edges=[self._edge(target, ctx)])
            hit = refine(ctx, term.value, term.tag) if tracking else ctx
            return Exit(
                TEST,
                value=term.value,
                tag=term.tag,
                site=term.site,
                edges=[self._edge(term.if_true, hit), self._edge(term.if_false, ctx)],
            )
        if isinstance(term, ShapeTest):
            if not features.shapes:
                return Exit(SHAPE_DYN, value=term.value, site=term.site, edges=[self._edge(term.if_true, ctx)])
            if ctx.shape(term.value) is not None:
                self.sink.record("static_shape_eliminated")
                return Exit(JUMP, edges=[self._edge(term.if_true, ctx)])
            return Exit(SHAPES, value=term.value, site=term.site, extra=ShapeCascade(term.if_true, ctx, []))
        if isinstance(term, OverflowTest):
            ok = ctx.assign(term.dst, INT32) if tracking else ctx
            return Exit(
                OVERFLOW,
                op=term.op,
                dst=term.dst,
                args=(term.a, term.b),
                edges=[self._edge(term.if_ok, ok), self._edge(term.if_ovf, ctx)],
            )
        if isinstance(term, Branch):
            return Exit(
                BRANCH,
                value=term.value,
                edges=[self._edge(term.if_true, ctx), self._edge(term.if_false, ctx)],
            )
        if isinstance(term, Call):
            return self._walk_call(term, ctx, tracking)
        if isinstance(term, Return):
            if features.continuations and fid != self.program.init_fid:
                self.record_return_type(fid, ctx.tag(term.value))
            return Exit(RETURN, value=term.value)
        if isinstance(term, HaltTerm):
            return Exit(HALT, value=term.value, op=term.message)
        raise TypeError(f"unknown terminator {term!r}")

    def _walk_call(self, term: Call, ctx: TypeContext, tracking: bool) -> Exit:
        features = self.features
        callee_tag = ctx.tag(term.callee)
        known = callee_tag.fid if features.shapes and callee_tag.is_known_closure else None
        builtin = BUILTINS.get(known) if isinstance(known, str) else None
        entry = None
        if isinstance(known, int) and features.entries:
            entry = self.request_entry_point(known, self._arg_context(ctx, term, known))
        keep_shapes = known is not None and (
            builtin is not None or self.program.functions[known].reshape_free
        )
        base = ctx if keep_shapes else ctx.without_shapes()
        if term.dst is not None:
            base = base.forget(term.dst)
        cont = Continuation(
            term.site,
            term.cont,
            term.dst,
            base,
            known if isinstance(known, int) else None,
            builtin,
        )
        return Exit(
            CALL,
            value=term.callee,
            site=term.site,
            dst=term.dst,
            args=term.args,
            extra=CallSite(known, entry, builtin, cont, term.construct),
            op=term.this,
        )

    def _arg_context(self, ctx: TypeContext, term: Call, fid: int) -> TypeContext:
        fn = self.program.functions[fid]
        entries = {}
        this = ctx.get(term.this)
        if this is not None:
            entries[FunctionIR.THIS_REG] = this
        for i, reg in enumerate(fn.param_regs):
            if i < len(term.args):
                arg = ctx.get(term.args[i])
                if arg is not None:
                    entries[reg] = arg
            else:
                entries[reg] = Entry(CONST)
        return TypeContext(entries)

    # Execution.

    def run(self) -> Value:
        """Run the global code of the program."""
        init = self.program.init
        return self._invoke(init, self.generic_entry(init.fid), UNDEFINED, [])

    def arity(self, callee: Closure) -> int:
        return len(self.program.functions[callee.fid].params)

    def invoke(self, callee: Closure, this: Value, args: list) -> Value:
        fn = self.program.functions[callee.fid]
        return self._invoke(fn, self.generic_entry(fn.fid), this, args)

    def call_global(self, name: str, args: Optional[list] = None) -> Value:
        """Call a global function from the host (benchmark harness)."""
        return call(self.heap.globals.get(name), UNDEFINED, list(args or []), self)

    def _new_frame(self, fn: FunctionIR, this: Value, args: list, cont) -> Frame:
        if len(self.frames) >= self.limits.max_call_depth:
            raise StackOverflow(f"call depth exceeds {self.limits.max_call_depth}")
        regs = [UNDEFINED] * fn.local_slots
        regs[FunctionIR.THIS_REG] = this
        for i, reg in enumerate(fn.param_regs):
            if i < len(args):
                regs[reg] = args[i]
        frame = Frame(fn.fid, regs, cont)
        self.frames.append(frame)
        return frame

    def _invoke(self, fn: FunctionIR, entry: EntryPoint, this: Value, args: list) -> Value:
        depth = len(self.frames)
        self._new_frame(fn, this, args, None)
        try:
            return self._loop(entry.version, depth)
        finally:
            del self.frames[depth:]

    def _follow(self, edge: Edge) -> BlockVersion:
        if edge.version is None:
            edge.version = self.request_block_version(edge.block_id, edge.ctx)
        return edge.version

    def _check_context(self, version: BlockVersion, regs: list) -> None:
        for reg, entry in version.ctx.items():
            value = regs[reg]
            if not has_tag(value, entry.tag):
                raise InvariantViolation(
                    f"{version.label()}: r{reg} claimed {entry.tag.name}, holds {tag_of(value).name}"
                )
            if entry.shape is not None and value.shape.shape_id != entry.shape:
                raise InvariantViolation(
                    f"{version.label()}: r{reg} claimed S{entry.shape}, has S{value.shape.shape_id}"
                )

    def _resume(self, cont: Continuation, value: Value, regs: list, counted: bool) -> BlockVersion:
        if cont.version is None:
            self.request_continuation(cont)
        if counted:
            self.sink.record("return")
            if cont.assumed is not None:
                self.sink.record("known_return")
        if cont.dst is not None:
            if self.limits.validate and cont.assumed is not None and not has_tag(value, cont.assumed):
                raise InvariantViolation(
                    f"continuation at site {cont.site} assumed {cont.assumed.name}, got {tag_of(value).name}"
                )
            regs[cont.dst] = value
        return cont.version

    def _loop(self, version: BlockVersion, depth: int) -> Value:
        frames = self.frames
        regs = frames[-1].regs
        stats = self.stats
        sink = self.sink
        validate = self.limits.validate
        budget = self.limits.instr_budget
        removed = self.removed
        while True:
            if version.code is None:
                self.specialize_block(version)
            if validate:
                self._check_context(version, regs)
            code = version.code
            exit = version.exit
            stats.dynInstrs += len(code) + 1
            if stats.dynInstrs > budget:
                raise BudgetExceeded(f"instruction budget of {budget} exceeded")
            if code:
                self._execute(code, regs, validate)
            kind = exit.kind
            if kind == JUMP:
                version = self._follow(exit.edges[0])
            elif kind == TEST:
                outcome = has_tag(regs[exit.value], exit.tag)
                key = (exit.site, exit.tag)
                if removed is not None and key in removed:
                    if removed[key] != outcome:
                        raise DeterminismViolation(
                            f"site {exit.site[0]}.{exit.site[1]} {exit.tag.name} test was constant {removed[key]}, now {outcome}"
                        )
                    sink.tag_test(key, outcome, counted=False)
                else:
                    sink.tag_test(key, outcome)
                version = self._follow(exit.edges[0 if outcome else 1])
            elif kind == SHAPES:
                version = self._shape_cascade(exit, regs[exit.value])
            elif kind == SHAPE_DYN:
                stats.dynShapeTests += 1
                version = self._follow(exit.edges[0])
            elif kind == OVERFLOW:
                stats.overflowChecks += 1
                a, b = exit.args
                result = int32_op(exit.op, regs[a], regs[b])
                if result is None:
                    version = self._follow(exit.edges[1])
                else:
                    regs[exit.dst] = result
                    version = self._follow(exit.edges[0])
            elif kind == BRANCH:
                version = self._follow(exit.edges[0 if truthy(regs[exit.value]) else 1])
            elif kind == CALL:
                site: CallSite = exit.extra
                callee = check_callable(regs[exit.value])
                stats.totalCalls += 1
                if site.callee_fid is not None:
                    stats.knownCalleeCalls += 1
                args = [regs[a] for a in exit.args]
                this = regs[exit.op]
                if isinstance(callee.fid, str):
                    result = call(callee, this, args, self)
                    version = self._resume(site.cont, result, regs, counted=False)
                    continue
                fn = self.program.functions[callee.fid]
                entry = site.entry if site.entry is not None else self.generic_entry(fn.fid)
                regs = self._new_frame(fn, this, args, site.cont).regs
                version = entry.version
            elif kind == RETURN:
                value = regs[exit.value]
                done = frames.pop()
                if len(frames) == depth:
                    return value
                regs = frames[-1].regs
                version = self._resume(done.cont, value, regs, counted=True)
            else:
                message = exit.op
                if exit.value is not None:
                    message = f"{message}: {display(regs[exit.value])}"
                raise Halt(message)

    def _shape_cascade(self, exit: Exit, obj: HeapObject) -> BlockVersion:
        cascade: ShapeCascade = exit.extra
        stats = self.stats
        for shape, edge in cascade.arms:
            stats.dynShapeTests += 1
            if obj.shape is shape:
                return self._follow(edge)
        if len(cascade.arms) < self.limits.maxvers:
            ctx = refine(cascade.ctx, exit.value, OBJECT, obj.shape.shape_id)
            edge = self._edge(cascade.block_id, ctx)
            cascade.arms.append((obj.shape, edge))
            stats.dynShapeTests += 1
            self.sink.record("compile")
            return self._follow(edge)
        if cascade.fallback is None:
            cascade.fallback = self._edge(cascade.block_id, cascade.ctx)
        return self._follow(cascade.fallback)

    def _execute(self, code: list, regs: list, validate: bool) -> None:
        heap = self.heap
        for op, dst, args, imm in code:
            if op == "Const":
                regs[dst] = imm
            elif op == "Move":
                regs[dst] = regs[args[0]]
            elif op == "GetSlot":
                regs[dst] = regs[args[0]].slots[imm]
            elif op == "SetSlot":
                regs[args[0]].slots[imm] = regs[args[1]]
            elif op == "GetGlobal":
                regs[dst] = heap.globals[imm]
            elif op == "SetGlobal":
                heap.globals[imm] = regs[args[0]]
            elif op == "F64":
                if imm == "NegF64":
                    regs[dst] = -float(regs[args[0]])
                else:
                    regs[dst] = f64_op(imm, regs[args[0]], regs[args[1]])
            elif op == "Cmp":
                regs[dst] = compare(imm, regs[args[0]], regs[args[1]])
            elif op == "ToBool":
                regs[dst] = truthy(regs[args[0]])
            elif op == "Not":
                regs[dst] = not regs[args[0]]
            elif op == "I32toF64":
                regs[dst] = float(regs[args[0]])
            elif op == "ModI32":
                regs[dst] = mod_i32(regs[args[0]], regs[args[1]])
            elif op == "MakeClosure":
                regs[dst] = Closure(imm)
            elif op == "AllocObject":
                regs[dst] = heap.alloc_object()
            elif op == "AllocArray":
                regs[dst] = JSArray([regs[a] for a in args])
            elif op == "AddSlot":
                obj = regs[args[0]]
                obj.shape = imm
                obj.slots.append(regs[args[1]])
                if validate:
                    self._check_object(obj)
            elif op == "Reshape":
                obj = regs[args[0]]
                obj.shape, slot = imm
                obj.slots[slot] = regs[args[1]]
                if validate:
                    self._check_object(obj)
            elif op == "SetPropDyn":
                heap.set_prop(regs[args[0]], imm, regs[args[1]])
                if validate:
                    self._check_object(regs[args[0]])
            elif op == "GetPropDyn":
                regs[dst] = heap.get_prop(regs[args[0]], imm)
            elif op == "MissingProp":
                raise Halt(f"missing property {imm!r}")
            elif op == "ArrayRead":
                regs[dst] = array_read(regs[args[0]], regs[args[1]])
            elif op == "ArrayWrite":
                array_write(regs[args[0]], regs[args[1]], regs[args[2]])
            elif op == "ArrayLength":
                regs[dst] = len(regs[args[0]].elems)
            elif op == "StrLength":
                regs[dst] = len(regs[args[0]])
            elif op == "StrConcat":
                regs[dst] = regs[args[0]] + regs[args[1]]
            elif op == "RefEq":
                same = regs[args[0]] is regs[args[1]]
                regs[dst] = same if imm == "==" else not same
            else:
                raise TypeError(f"unknown specialized op {op}")

    def _check_object(self, obj: HeapObject) -> None:
        problems = self.heap.check_object(obj)
        if problems:
            raise InvariantViolation("; ".join(problems))

    # Reporting.

    def finish(self) -> StatsReport:
        """Fill the version histograms and code size into the report."""
        stats = self.stats
        per_block: dict[int, int] = {}
        emitted = 0
        for block_id in sorted(set(self.versions) | set(self.generic)):
            versions = list(self.versions.get(block_id, {}).values())
            if block_id in self.generic:
                versions.append(self.generic[block_id])
            per_block[len(versions)] = per_block.get(len(versions), 0) + 1
            emitted += sum(len(v.code) + 1 for v in versions if v.code is not None)
        per_function: dict[int, int] = {}
        for fid in self.program.functions:
            count = len(self.entries.get(fid, {}))
            if count or fid in self.generic_entries:
                per_function[count] = per_function.get(count, 0) + 1
        for entry in self._all_entries():
            if entry.version.code is not None:
                emitted += len(entry.version.code) + 1
        stats.versionsPerBlock = per_block
        stats.entryPointsPerFunction = per_function
        stats.emittedInstrCount = emitted
        stats.functionsCompiled = sum(
            1
            for fid in self.program.functions
            if fid != self.program.init_fid and (fid in self.generic_entries or self.entries.get(fid))
        )
        stats.functionsCausingInvalidation = len(self.invalidating)
        stats.shapeRetypes = self.heap.shapes.retype_count
        return stats

    def _all_entries(self) -> list[EntryPoint]:
        entries = []
        for fid in sorted(self.program.functions):
            if fid in self.generic_entries:
                entries.append(self.generic_entries[fid])
            entries.extend(self.entries.get(fid, {}).values())
        return entries

    def block_versions(self, block_id: int) -> tuple[list[BlockVersion], Optional[BlockVersion]]:
        """Non-generic versions of a block and its generic version, if any."""
        return list(self.versions.get(block_id, {}).values()), self.generic.get(block_id)

    def reachable_versions(self, entry: EntryPoint) -> list[BlockVersion]:
        """Versions of the entry's function reached from it through compiled edges."""
        seen: list[BlockVersion] = []
        work = [entry.version]
        while work:
            version = work.pop()
            if version in seen:
                continue
            seen.append(version)
            exit = version.exit
            if exit is None:
                continue
            targets = [e.version for e in exit.edges]
            if exit.kind == SHAPES:
                targets += [edge.version for _, edge in exit.extra.arms]
                if exit.extra.fallback is not None:
                    targets.append(exit.extra.fallback.version)
            if exit.kind == CALL:
                targets.append(exit.extra.cont.version)
            work.extend(t for t in targets if t is not None)
        return seen

    def specialized_tests(self, entry: EntryPoint) -> dict[str, int]:
        """Runtime tag tests and shape tests left in the code of an entry point."""
        tag_tests = shape_tests = 0
        for version in self.reachable_versions(entry):
            exit = version.exit
            if exit is None:
                continue
            if exit.kind == TEST:
                tag_tests += 1
            elif exit.kind == SHAPES:
                shape_tests += len(exit.extra.arms)
            elif exit.kind == SHAPE_DYN:
                shape_tests += 1
        return {"tagTests": tag_tests, "shapeTests": shape_tests}

    def dump_versions(self) -> str:
        """Deterministic listing of entry points and block versions."""
        lines = []
        for fid, fn in self.program.functions.items():
            names = fn.reg_names
            lines.append(f"function {fn.name} #{fid}")
            entries = []
            if fid in self.generic_entries:
                entries.append(self.generic_entries[fid])
            entries.extend(self.entries.get(fid, {}).values())
            for entry in entries:
                label = "generic" if entry.generic else f"#{entry.version.number}"
                tests = self.specialized_tests(entry)
                lines.append(
                    f"  entry {label} {{{entry.ctx.describe(names)}}}"
                    f" tag-tests={tests['tagTests']} shape-tests={tests['shapeTests']}"
                    f"{' (stub)' if entry.is_stub else ''}"
                )
            for block in fn.blocks:
                versions, generic = self.block_versions(block.block_id)
                if generic is not None:
                    versions = versions + [generic]
                for version in versions:
                    state = "stub" if version.is_stub else f"{len(version.code)} instrs"
                    lines.append(f"  {version.label()} {{{version.ctx.describe(names)}}} {state}")
        return "\n".join(lines) + "\n"


def execute(
    program: LoweredProgram,
    mode: str = "entry+cont",
    limits: Optional[Limits] = None,
    *,
    name: str = "<program>",
    output: Optional[Callable[[str], None]] = None,
) -> RunResult:
    """Run a lowered program to completion in one mode.

    The `oracle` mode records tag-test outcomes in a baseline run and then
    reruns with every constant site removed.

    Raises:
        Halt: when the program stops on a fatal condition; the partial
            report is attached as `report`.
    """
    if mode == "oracle":
        from app.oracle import record_outcomes, rerun_removed

        table, _ = record_outcomes(program, limits, name=name)
        return rerun_removed(program, table, limits, name=name, output=output)
    vm = VM(program, mode, limits, name=name, output=output)
    return run_vm(vm)


def run_vm(vm: VM) -> RunResult:
    try:
        result = vm.run()
    except Halt as exc:
        exc.report = vm.finish()
        exc.output = list(vm.builtins.lines)
        logger.warning("%s (%s): halted: %s", vm.stats.program, vm.mode, exc.message)
        raise
    report = vm.finish()
    logger.info(
        "%s (%s): %d tag tests, %d shape tests, %d instrs",
        report.program,
        report.mode,
        report.dynTagTests,
        report.dynShapeTests,
        report.dynInstrs,
    )
    return RunResult(result, report, list(vm.builtins.lines), vm)
