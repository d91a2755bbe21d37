"""Control-flow graph IR and lowering from the AST.

Every dynamic type check a naive implementation performs becomes an explicit
`TagTest` or `ShapeTest` terminator with a stable site id, so the
specialization engine can count and remove them. Registers are per function:
r0 is `this`, then parameters, then locals, then temporaries.
"""

from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Union

from app.exceptions import LowerError
from app.frontend import Node
from app.runtime import (
    BINARY_DISPATCH,
    BUILTINS,
    INDEX_DISPATCH,
    INDEX_WRITE_DISPATCH,
    NEGATE_DISPATCH,
    PROP_WRITE_DISPATCH,
    TRUTH_DISPATCH,
    Dispatch,
    prop_dispatch,
)
from app.typesys import (
    ARRAY,
    CLOSURE,
    CONST,
    FLOAT64,
    INT32,
    NULL,
    OBJECT,
    STRING,
    TypeTag,
)

TestSiteId = tuple[int, int]

BOOLEAN_OPS = frozenset({"==", "!=", "<", "<=", ">", ">=", "&&", "||"})
LITERAL_TAGS = {
    "IntLit": INT32,
    "FloatLit": FLOAT64,
    "StrLit": STRING,
    "BoolLit": CONST,
    "NullLit": NULL,
    "ObjectLit": OBJECT,
    "New": OBJECT,
    "ArrayLit": ARRAY,
    "FunctionExpr": CLOSURE,
}


def static_tag(node: Node) -> Optional[TypeTag]:
    """Tag of an expression known without any context, or None."""
    tag = LITERAL_TAGS.get(node.kind)
    if tag is not None:
        return tag
    if node.kind == "BinOp" and node.value in BOOLEAN_OPS:
        return CONST
    if node.kind == "UnOp" and node.value == "!":
        return CONST
    if node.kind in ("Assign", "PropWrite", "IndexWrite"):
        return static_tag(node.children[-1])
    return None


def tag_matches(known: TypeTag, tested: TypeTag) -> bool:
    if tested.kind == "closure" and tested.fid is None:
        return known.kind == "closure"
    return known == tested


@dataclass(slots=True)
class Instr:
    op: str
    dst: Optional[int] = None
    args: tuple[int, ...] = ()
    imm: Any = None

    def __str__(self) -> str:
        text = self.op
        if self.imm is not None:
            text += f"<{self.imm!r}>" if not isinstance(self.imm, str) else f"<{self.imm}>"
        if self.args:
            text += " " + ", ".join(f"r{a}" for a in self.args)
        return f"r{self.dst} = {text}" if self.dst is not None else text


@dataclass(slots=True)
class Jump:
    target: int

    def successors(self) -> tuple[int, ...]:
        return (self.target,)

    def uses(self) -> tuple[int, ...]:
        return ()

    def __str__(self) -> str:
        return f"jump b{self.target}"


@dataclass(slots=True)
class TagTest:
    value: int
    tag: TypeTag
    if_true: int
    if_false: int
    site: TestSiteId

    def successors(self) -> tuple[int, ...]:
        return (self.if_true, self.if_false)

    def uses(self) -> tuple[int, ...]:
        return (self.value,)

    def __str__(self) -> str:
        return (
            f"tagtest r{self.value} is {self.tag.name} ? b{self.if_true} : b{self.if_false}"
            f"  #site{self.site[0]}.{self.site[1]}"
        )


@dataclass(slots=True)
class ShapeTest:
    """Inline-cache shape check; `if_false` is the shape-miss stub."""

    value: int
    if_true: int
    if_false: int
    site: TestSiteId

    def successors(self) -> tuple[int, ...]:
        return (self.if_true, self.if_false)

    def uses(self) -> tuple[int, ...]:
        return (self.value,)

    def __str__(self) -> str:
        return (
            f"shapetest r{self.value} ? b{self.if_true} : b{self.if_false}"
            f"  #site{self.site[0]}.{self.site[1]}"
        )


@dataclass(slots=True)
class OverflowTest:
    """Int32 operation writing `dst` on the ok edge; `if_ovf` recomputes."""

    op: str
    dst: int
    a: int
    b: int
    if_ok: int
    if_ovf: int

    def successors(self) -> tuple[int, ...]:
        return (self.if_ok, self.if_ovf)

    def uses(self) -> tuple[int, ...]:
        return (self.a, self.b)

    def __str__(self) -> str:
        return f"r{self.dst} = {self.op} r{self.a}, r{self.b} ovf? b{self.if_ovf} : b{self.if_ok}"


@dataclass(slots=True)
class Branch:
    value: int
    if_true: int
    if_false: int

    def successors(self) -> tuple[int, ...]:
        return (self.if_true, self.if_false)

    def uses(self) -> tuple[int, ...]:
        return (self.value,)

    def __str__(self) -> str:
        return f"branch r{self.value} ? b{self.if_true} : b{self.if_false}"


@dataclass(slots=True)
class Call:
    """Call writing `dst` (if any) on return, then continuing at `cont`."""

    dst: Optional[int]
    callee: int
    this: int
    args: tuple[int, ...]
    cont: int
    site: TestSiteId
    construct: bool = False

    def successors(self) -> tuple[int, ...]:
        return (self.cont,)

    def uses(self) -> tuple[int, ...]:
        return (self.callee, self.this, *self.args)

    def __str__(self) -> str:
        args = ", ".join(f"r{a}" for a in self.args)
        kind = "new" if self.construct else "call"
        head = f"r{self.dst} = " if self.dst is not None else ""
        return f"{head}{kind} r{self.callee}(this=r{self.this}; {args}) -> b{self.cont}"


@dataclass(slots=True)
class Return:
    value: int

    def successors(self) -> tuple[int, ...]:
        return ()

    def uses(self) -> tuple[int, ...]:
        return (self.value,)

    def __str__(self) -> str:
        return f"return r{self.value}"


@dataclass(slots=True)
class Halt:
    message: str
    value: Optional[int] = None

    def successors(self) -> tuple[int, ...]:
        return ()

    def uses(self) -> tuple[int, ...]:
        return () if self.value is None else (self.value,)

    def __str__(self) -> str:
        tail = f" r{self.value}" if self.value is not None else ""
        return f"halt {self.message!r}{tail}"


Terminator = Union[Jump, TagTest, ShapeTest, OverflowTest, Branch, Call, Return, Halt]
TERMINATOR_TYPES = (Jump, TagTest, ShapeTest, OverflowTest, Branch, Call, Return, Halt)

SHAPE_MISS_STUB = "shape-miss-stub"


@dataclass(eq=False)
class BasicBlock:
    block_id: int
    fid: int
    instrs: list = field(default_factory=list)
    term: Optional[Terminator] = None
    live_in: frozenset = frozenset()

    def defs(self) -> Iterator[int]:
        for ins in self.instrs:
            if ins.dst is not None:
                yield ins.dst
        if isinstance(self.term, (Call, OverflowTest)) and self.term.dst is not None:
            yield self.term.dst


@dataclass(eq=False)
class FunctionIR:
    fid: int
    name: str
    params: tuple[str, ...]
    blocks: list[BasicBlock]
    entry_block_id: int
    local_slots: int
    reg_names: dict[int, str] = field(default_factory=dict)
    reshape_free: bool = False

    THIS_REG = 0

    @property
    def param_regs(self) -> tuple[int, ...]:
        return tuple(range(1, 1 + len(self.params)))

    def block(self, block_id: int) -> BasicBlock:
        for block in self.blocks:
            if block.block_id == block_id:
                return block
        raise KeyError(block_id)

    @property
    def entry(self) -> BasicBlock:
        return self.block(self.entry_block_id)

    def sites(self) -> list[TestSiteId]:
        return [
            b.term.site for b in self.blocks if isinstance(b.term, (TagTest, ShapeTest))
        ]

    def tag_test_sites(self) -> list[TestSiteId]:
        """Distinct operand occurrences guarded by tag tests."""
        return sorted({b.term.site for b in self.blocks if isinstance(b.term, TagTest)})


@dataclass(eq=False)
class LoweredProgram:
    functions: dict[int, FunctionIR]
    init_fid: int
    global_names: tuple[str, ...]

    def __post_init__(self) -> None:
        self.blocks: dict[int, BasicBlock] = {
            b.block_id: b for fn in self.functions.values() for b in fn.blocks
        }

    def function_named(self, name: str) -> FunctionIR:
        for fn in self.functions.values():
            if fn.name == name:
                return fn
        raise KeyError(name)

    @property
    def init(self) -> FunctionIR:
        return self.functions[self.init_fid]


def _hoisted(body: Node) -> tuple[list[str], list[Node]]:
    """`var` names and function declarations of a body, not entering nested functions."""
    names: list[str] = []
    decls: list[Node] = []

    def visit(node: Node) -> None:
        if node.kind == "VarDecl" and node.value not in names:
            names.append(node.value)
        if node.kind == "FunctionDecl":
            decls.append(node)
            return
        if node.kind == "FunctionExpr":
            return
        for child in node.children:
            visit(child)

    for stmt in body.children:
        visit(stmt)
    return names, decls


class _Lowering:
    """Program-wide lowering state: function ids and block ids."""

    def __init__(self) -> None:
        self.functions: dict[int, FunctionIR] = {}
        self.next_fid = 1
        self.next_block = 0
        self.pending: list[tuple[int, Node, tuple[dict, ...]]] = []
        self.globals: set[str] = set(BUILTINS)
        self.decl_names: dict[str, int] = {}
        self.reassigned: set[str] = set()

    def new_fid(self, node: Node, scopes: tuple[dict, ...]) -> int:
        fid = self.next_fid
        self.next_fid += 1
        self.pending.append((fid, node, scopes))
        return fid


class FunctionBuilder:
    """Lowers one function body into basic blocks."""

    def __init__(
        self,
        lowering: _Lowering,
        fid: int,
        name: str,
        params: tuple[str, ...],
        body: Node,
        outer: tuple[dict, ...],
        top_level: bool,
    ) -> None:
        self.lowering = lowering
        self.fid = fid
        self.name = name
        self.params = params
        self.body = body
        self.outer = outer
        self.top_level = top_level
        self.blocks: list[BasicBlock] = []
        self.seq = 0
        self.scope: dict[str, int] = {}
        self.reg_names: dict[int, str] = {0: "this"}
        self.nregs = 1
        for p in params:
            self.scope[p] = self._reg(p)
        self.block = self.new_block()
        self.entry_id = self.block.block_id

    def _reg(self, name: Optional[str] = None) -> int:
        reg = self.nregs
        self.nregs += 1
        if name is not None:
            self.reg_names[reg] = name
        return reg

    def temp(self) -> int:
        return self._reg()

    def new_block(self) -> BasicBlock:
        block = BasicBlock(self.lowering.next_block, self.fid)
        self.lowering.next_block += 1
        self.blocks.append(block)
        return block

    def site(self) -> TestSiteId:
        self.seq += 1
        return (self.fid, self.seq)

    def emit(self, op: str, dst: Optional[int] = None, args=(), imm: Any = None) -> Optional[int]:
        self.block.instrs.append(Instr(op, dst, tuple(args), imm))
        return dst

    def terminate(self, term: Terminator) -> None:
        self.block.term = term

    def goto(self, block: BasicBlock) -> None:
        self.block = block

    def const(self, value: Any) -> int:
        dst = self.temp()
        if value is None:
            self.emit("ConstNull", dst)
        elif value is True or value is False:
            self.emit("ConstBool", dst, imm=value)
        elif isinstance(value, int):
            self.emit("ConstInt", dst, imm=value)
        elif isinstance(value, float):
            self.emit("ConstFloat", dst, imm=value)
        elif isinstance(value, str):
            self.emit("ConstStr", dst, imm=value)
        else:
            self.emit("ConstUndef", dst)
        return dst

    def _error(self, node: Node, message: str) -> LowerError:
        return LowerError(node.line, node.column, message)

    def build(self) -> FunctionIR:
        names, decls = _hoisted(self.body)
        if not self.top_level:
            for name in names:
                if name not in self.scope:
                    self.scope[name] = self._reg(name)
                    self.emit("ConstUndef", self.scope[name])
            for decl in decls:
                name = decl.value[0]
                if name not in self.scope:
                    self.scope[name] = self._reg(name)
        for decl in decls:
            fid = self.lowering.new_fid(decl, self.outer + (self.scope,))
            name = decl.value[0]
            if self.top_level:
                reg = self.emit("MakeClosure", self.temp(), imm=fid)
                self.emit("SetGlobal", None, (reg,), imm=name)
            else:
                self.emit("MakeClosure", self.scope[name], imm=fid)
        body = self.new_block()
        self.terminate(Jump(body.block_id))
        self.goto(body)
        for stmt in self.body.children:
            self.statement(stmt)
        self.terminate(Return(self.const(...)))
        blocks = self._reachable()
        fn = FunctionIR(
            self.fid,
            self.name,
            self.params,
            blocks,
            self.entry_id,
            self.nregs,
            self.reg_names,
        )
        compute_liveness(fn)
        return fn

    def _reachable(self) -> list[BasicBlock]:
        by_id = {b.block_id: b for b in self.blocks}
        seen = {self.entry_id}
        work = [self.entry_id]
        while work:
            block = by_id[work.pop()]
            for succ in block.term.successors():
                if succ not in seen:
                    seen.add(succ)
                    work.append(succ)
        return [b for b in self.blocks if b.block_id in seen]

    # Statements.

    def statement(self, node: Node) -> None:
        kind = node.kind
        if kind == "FunctionDecl":
            return
        if kind == "VarDecl":
            if node.children:
                self.assign(node, node.value, self.expr(node.children[0]))
        elif kind == "ExprStmt":
            self.expr(node.children[0])
        elif kind == "Block":
            for stmt in node.children:
                self.statement(stmt)
        elif kind == "If":
            cond = self.condition(node.children[0])
            then_block, else_block, join = self.new_block(), self.new_block(), self.new_block()
            self.terminate(Branch(cond, then_block.block_id, else_block.block_id))
            self.goto(then_block)
            self.statement(node.children[1])
            self.terminate(Jump(join.block_id))
            self.goto(else_block)
            if len(node.children) > 2:
                self.statement(node.children[2])
            self.terminate(Jump(join.block_id))
            self.goto(join)
        elif kind == "While":
            head, body, done = self.new_block(), self.new_block(), self.new_block()
            self.terminate(Jump(head.block_id))
            self.goto(head)
            cond = self.condition(node.children[0])
            self.terminate(Branch(cond, body.block_id, done.block_id))
            self.goto(body)
            self.statement(node.children[1])
            self.terminate(Jump(head.block_id))
            self.goto(done)
        elif kind == "Return":
            if self.top_level:
                raise self._error(node, "return outside function")
            value = self.expr(node.children[0]) if node.children else self.const(...)
            self.terminate(Return(value))
            self.goto(self.new_block())
        elif kind == "Throw":
            value = self.expr(node.children[0])
            self.terminate(Halt("uncaught throw", value))
            self.goto(self.new_block())
        else:
            raise self._error(node, f"unexpected statement {kind}")

    def condition(self, node: Node) -> int:
        return self.truth(self.expr(node), static_tag(node))

    # Name resolution.

    def assign(self, node: Node, name: str, value: int) -> None:
        if name in self.scope:
            self.emit("Move", self.scope[name], (value,))
        elif name in self.lowering.globals:
            if name in self.lowering.decl_names or name in BUILTINS:
                self.lowering.reassigned.add(name)
            self.emit("SetGlobal", None, (value,), imm=name)
        else:
            raise self._capture_or_unresolved(node, name)

    def _capture_or_unresolved(self, node: Node, name: str) -> LowerError:
        if any(name in scope for scope in self.outer):
            return self._error(node, f"captured variable {name!r} is not supported")
        return self._error(node, f"unresolved identifier {name!r}")

    def read(self, node: Node, name: str) -> int:
        if name in self.scope:
            return self.scope[name]
        if any(name in scope for scope in self.outer):
            raise self._capture_or_unresolved(node, name)
        if name in self.lowering.globals:
            return self.emit("GetGlobal", self.temp(), imm=name)
        raise self._capture_or_unresolved(node, name)

    # Tag-test cascades.

    def dispatch(
        self,
        reg: int,
        known: Optional[TypeTag],
        tags: tuple[TypeTag, ...],
        site: Optional[TestSiteId] = None,
    ) -> tuple[list[tuple[int, BasicBlock]], Optional[BasicBlock]]:
        """Emit the tests selecting among `tags`.

        Every test of the cascade shares one site, the operand occurrence.

        Returns the blocks reached for each arm index and the block reached
        when no arm matches (None when an arm matches statically).
        """
        arms = []
        current = self.block
        if site is None and known is None and tags:
            site = self.site()
        for i, tag in enumerate(tags):
            if known is not None:
                if tag_matches(known, tag):
                    arms.append((i, current))
                    return arms, None
                continue
            hit, miss = self.new_block(), self.new_block()
            current.term = TagTest(reg, tag, hit.block_id, miss.block_id, site)
            arms.append((i, hit))
            current = miss
        return arms, current

    def binary_dispatch(
        self,
        table: Dispatch,
        a: int,
        ta: Optional[TypeTag],
        b: int,
        tb: Optional[TypeTag],
        emit_action,
    ) -> None:
        left_arms, left_miss = self.dispatch(a, ta, tuple(arm[0] for arm in table.arms))
        right_site = self.site() if tb is None else None
        for i, block in left_arms:
            left_tag, rights, right_miss_action = table.arms[i]
            self.goto(block)
            right_arms, right_miss = self.dispatch(b, tb, tuple(r[0] for r in rights), right_site)
            for j, rblock in right_arms:
                self.goto(rblock)
                emit_action(rights[j][1], left_tag, rights[j][0])
            if right_miss is not None:
                self.goto(right_miss)
                emit_action(right_miss_action, left_tag, None)
        if left_miss is not None:
            self.goto(left_miss)
            emit_action(table.otherwise, None, None)

    def unary_dispatch(self, arms, otherwise: str, reg: int, known, emit_action) -> None:
        reached, miss = self.dispatch(reg, known, tuple(arm[0] for arm in arms))
        for i, block in reached:
            self.goto(block)
            emit_action(arms[i][1], arms[i][0])
        if miss is not None:
            self.goto(miss)
            emit_action(otherwise, None)

    def truth(self, reg: int, known: Optional[TypeTag]) -> int:
        """A boolean register holding the truthiness of `reg`."""
        if known == CONST:
            return reg
        dst = self.temp()
        join = self.new_block()

        def action(name: str, tag: Optional[TypeTag]) -> None:
            if name in ("False", "True"):
                self.emit("ConstBool", dst, imm=name == "True")
            else:
                self.emit("ToBool", dst, (reg,), imm=name)
            self.terminate(Jump(join.block_id))

        self.unary_dispatch(TRUTH_DISPATCH, "True", reg, known, action)
        self.goto(join)
        return dst

    def to_f64(self, reg: int, tag: Optional[TypeTag]) -> int:
        if tag == INT32:
            return self.emit("I32toF64", self.temp(), (reg,))
        return reg

    def arith_action(self, op: str, dst: int, a: int, b: int, join: BasicBlock):
        def action(name: str, left: Optional[TypeTag], right: Optional[TypeTag]) -> None:
            if name in ("AddI32", "SubI32", "MulI32", "DivI32"):
                ovf = self.new_block()
                self.terminate(OverflowTest(name, dst, a, b, join.block_id, ovf.block_id))
                self.goto(ovf)
                fa, fb = self.to_f64(a, INT32), self.to_f64(b, INT32)
                self.emit(name.replace("I32", "F64"), dst, (fa, fb))
            elif name == "ModI32":
                self.emit("ModI32", dst, (a, b))
            elif name in ("AddF64", "SubF64", "MulF64", "DivF64", "ModF64"):
                self.emit(name, dst, (self.to_f64(a, left), self.to_f64(b, right)))
            elif name == "CmpI32":
                self.emit("CmpI32", dst, (a, b), imm=op)
            elif name == "CmpF64":
                self.emit("CmpF64", dst, (self.to_f64(a, left), self.to_f64(b, right)), imm=op)
            elif name in ("StrConcat",):
                self.emit("StrConcat", dst, (a, b))
            elif name in ("StrEq", "RefEq"):
                self.emit(name, dst, (a, b), imm=op)
            elif name == "False":
                self.emit("ConstBool", dst, imm=op == "!=")
            else:
                self.terminate(Halt(f"unsupported operands for {op}"))
                return
            self.terminate(Jump(join.block_id))

        return action

    # Expressions.

    def expr(self, node: Node) -> int:
        method = getattr(self, f"expr_{node.kind}", None)
        if method is None:
            raise self._error(node, f"unexpected expression {node.kind}")
        return method(node)

    def expr_IntLit(self, node: Node) -> int:
        return self.const(node.value)

    def expr_FloatLit(self, node: Node) -> int:
        return self.const(float(node.value))

    def expr_StrLit(self, node: Node) -> int:
        return self.const(node.value)

    def expr_BoolLit(self, node: Node) -> int:
        return self.const(bool(node.value))

    def expr_NullLit(self, node: Node) -> int:
        return self.const(None)

    def expr_This(self, node: Node) -> int:
        if self.top_level:
            raise self._error(node, "`this` outside function")
        return FunctionIR.THIS_REG

    def expr_Ident(self, node: Node) -> int:
        return self.read(node, node.value)

    def expr_Assign(self, node: Node) -> int:
        value = self.expr(node.children[0])
        self.assign(node, node.value, value)
        return value

    def expr_FunctionExpr(self, node: Node) -> int:
        fid = self.lowering.new_fid(node, self.outer + (self.scope,))
        return self.emit("MakeClosure", self.temp(), imm=fid)

    def expr_ObjectLit(self, node: Node) -> int:
        values = [self.expr(child) for child in node.children]
        obj = self.emit("AllocObject", self.temp())
        for key, value in zip(node.value, values):
            self.emit("InitProp", None, (obj, value), imm=key)
        return obj

    def expr_ArrayLit(self, node: Node) -> int:
        values = [self.expr(child) for child in node.children]
        return self.emit("AllocArray", self.temp(), values)

    def expr_UnOp(self, node: Node) -> int:
        operand = node.children[0]
        reg = self.expr(operand)
        known = static_tag(operand)
        if node.value == "!":
            return self.emit("Not", self.temp(), (self.truth(reg, known),))
        dst = self.temp()
        join = self.new_block()

        def action(name: str, tag: Optional[TypeTag]) -> None:
            if name == "NegI32":
                ovf = self.new_block()
                self.terminate(OverflowTest("NegI32", dst, reg, reg, join.block_id, ovf.block_id))
                self.goto(ovf)
                self.emit("NegF64", dst, (self.to_f64(reg, INT32),))
            elif name == "NegF64":
                self.emit("NegF64", dst, (reg,))
            else:
                self.terminate(Halt("unsupported operand for unary -"))
                return
            self.terminate(Jump(join.block_id))

        self.unary_dispatch(NEGATE_DISPATCH, "Halt", reg, known, action)
        self.goto(join)
        return dst

    def expr_BinOp(self, node: Node) -> int:
        op = node.value
        left, right = node.children
        if op in ("&&", "||"):
            return self.logical(op, left, right)
        a = self.expr(left)
        b = self.expr(right)
        ta, tb = static_tag(left), static_tag(right)
        dst = self.temp()
        if op in ("==", "!=") and NULL in (ta, tb):
            return self.null_compare(op, a, ta, b, tb, dst)
        join = self.new_block()
        self.binary_dispatch(
            BINARY_DISPATCH[op], a, ta, b, tb, self.arith_action(op, dst, a, b, join)
        )
        self.goto(join)
        return dst

    def null_compare(self, op, a, ta, b, tb, dst) -> int:
        other, known = (b, tb) if ta == NULL else (a, ta)
        if known is not None:
            return self.emit("ConstBool", dst, imm=(known == NULL) == (op == "=="))
        hit, miss, join = self.new_block(), self.new_block(), self.new_block()
        self.terminate(TagTest(other, NULL, hit.block_id, miss.block_id, self.site()))
        for block, result in ((hit, op == "=="), (miss, op != "==")):
            self.goto(block)
            self.emit("ConstBool", dst, imm=result)
            self.terminate(Jump(join.block_id))
        self.goto(join)
        return dst

    def logical(self, op: str, left: Node, right: Node) -> int:
        dst = self.temp()
        first = self.truth(self.expr(left), static_tag(left))
        rest, short, join = self.new_block(), self.new_block(), self.new_block()
        if op == "&&":
            self.terminate(Branch(first, rest.block_id, short.block_id))
        else:
            self.terminate(Branch(first, short.block_id, rest.block_id))
        self.goto(short)
        self.emit("ConstBool", dst, imm=op == "||")
        self.terminate(Jump(join.block_id))
        self.goto(rest)
        second = self.truth(self.expr(right), static_tag(right))
        self.emit("Move", dst, (second,))
        self.terminate(Jump(join.block_id))
        self.goto(join)
        return dst

    def prop_read(self, obj: int, known: Optional[TypeTag], name: str) -> int:
        dst = self.temp()
        join = self.new_block()

        def action(kind: str, tag: Optional[TypeTag]) -> None:
            if kind == "GetProp":
                hit, miss = self.new_block(), self.new_block()
                self.terminate(ShapeTest(obj, hit.block_id, miss.block_id, self.site()))
                self.goto(miss)
                self.terminate(Halt(SHAPE_MISS_STUB))
                self.goto(hit)
                self.emit("GetProp", dst, (obj,), imm=name)
            elif kind in ("ArrayLength", "StrLength"):
                self.emit(kind, dst, (obj,))
            else:
                self.terminate(Halt(f"cannot read property {name!r} of this value"))
                return
            self.terminate(Jump(join.block_id))

        self.unary_dispatch(prop_dispatch(name), "Halt", obj, known, action)
        self.goto(join)
        return dst

    def expr_PropRead(self, node: Node) -> int:
        target = node.children[0]
        return self.prop_read(self.expr(target), static_tag(target), node.value)

    def expr_PropWrite(self, node: Node) -> int:
        target, value_node = node.children
        obj = self.expr(target)
        value = self.expr(value_node)
        join = self.new_block()

        def action(kind: str, tag: Optional[TypeTag]) -> None:
            if kind == "PutProp":
                hit, miss = self.new_block(), self.new_block()
                self.terminate(ShapeTest(obj, hit.block_id, miss.block_id, self.site()))
                self.goto(miss)
                self.terminate(Halt(SHAPE_MISS_STUB))
                self.goto(hit)
                self.emit("PutProp", None, (obj, value), imm=node.value)
                self.terminate(Jump(join.block_id))
            else:
                self.terminate(Halt(f"cannot write property {node.value!r} of this value"))

        self.unary_dispatch(PROP_WRITE_DISPATCH, "Halt", obj, static_tag(target), action)
        self.goto(join)
        return value

    def _index(self, node: Node, table: Dispatch, write: bool) -> int:
        arr_node, idx_node = node.children[:2]
        arr = self.expr(arr_node)
        idx = self.expr(idx_node)
        value = self.expr(node.children[2]) if write else None
        dst = None if write else self.temp()
        join = self.new_block()

        def action(name: str, left, right) -> None:
            if name == "ArrayRead":
                self.emit("ArrayRead", dst, (arr, idx))
            elif name == "ArrayWrite":
                self.emit("ArrayWrite", None, (arr, idx, value))
            else:
                self.terminate(Halt("unsupported index operands"))
                return
            self.terminate(Jump(join.block_id))

        self.binary_dispatch(table, arr, static_tag(arr_node), idx, static_tag(idx_node), action)
        self.goto(join)
        return value if write else dst

    def expr_IndexRead(self, node: Node) -> int:
        return self._index(node, INDEX_DISPATCH, False)

    def expr_IndexWrite(self, node: Node) -> int:
        return self._index(node, INDEX_WRITE_DISPATCH, True)

    def _call(self, dst, callee, this, args, construct=False) -> None:
        cont = self.new_block()
        self.terminate(Call(dst, callee, this, tuple(args), cont.block_id, self.site(), construct))
        self.goto(cont)

    def expr_Call(self, node: Node) -> int:
        callee = self.expr(node.children[0])
        args = [self.expr(arg) for arg in node.children[1:]]
        this = self.const(...)
        dst = self.temp()
        self._call(dst, callee, this, args)
        return dst

    def expr_MethodCall(self, node: Node) -> int:
        target = node.children[0]
        obj = self.expr(target)
        method = self.prop_read(obj, static_tag(target), node.value)
        args = [self.expr(arg) for arg in node.children[1:]]
        dst = self.temp()
        self._call(dst, method, obj, args)
        return dst

    def expr_New(self, node: Node) -> int:
        callee = self.expr(node.children[0])
        args = [self.expr(arg) for arg in node.children[1:]]
        obj = self.emit("AllocObject", self.temp())
        self._call(None, callee, obj, args, construct=True)
        return obj


def compute_liveness(fn: FunctionIR) -> None:
    """Fill `live_in` of every block (backward dataflow to a fixed point)."""
    by_id = {b.block_id: b for b in fn.blocks}
    gen: dict[int, set[int]] = {}
    kill: dict[int, set[int]] = {}
    for block in fn.blocks:
        used, defined = set(), set()
        for ins in block.instrs:
            used.update(a for a in ins.args if a not in defined)
            if ins.dst is not None:
                defined.add(ins.dst)
        used.update(a for a in block.term.uses() if a not in defined)
        if isinstance(block.term, (Call, OverflowTest)) and block.term.dst is not None:
            defined.add(block.term.dst)
        gen[block.block_id] = used
        kill[block.block_id] = defined
    live_in = {b.block_id: set(gen[b.block_id]) for b in fn.blocks}
    changed = True
    while changed:
        changed = False
        for block in reversed(fn.blocks):
            out = set()
            for succ in block.term.successors():
                out |= live_in[succ]
            new = gen[block.block_id] | (out - kill[block.block_id])
            if new != live_in[block.block_id]:
                live_in[block.block_id] = new
                changed = True
    for block_id, live in live_in.items():
        by_id[block_id].live_in = frozenset(live)


def _compute_reshape_free(program: LoweredProgram, lowering: _Lowering) -> None:
    """Mark functions that can never change the shape of an existing object."""
    direct: dict[int, Optional[set[int]]] = {}
    for fn in program.functions.values():
        callees: Optional[set[int]] = set()
        global_regs: dict[int, str] = {}
        for block in fn.blocks:
            for ins in block.instrs:
                if ins.op == "GetGlobal":
                    global_regs[ins.dst] = ins.imm
                if ins.op == "PutProp":
                    callees = None
            if callees is not None and isinstance(block.term, Call):
                name = global_regs.get(block.term.callee)
                if name in BUILTINS and name not in lowering.reassigned:
                    continue
                if name in lowering.decl_names and name not in lowering.reassigned:
                    callees.add(lowering.decl_names[name])
                else:
                    callees = None
        direct[fn.fid] = callees
    free = {fid for fid, callees in direct.items() if callees is not None}
    changed = True
    while changed:
        changed = False
        for fid in list(free):
            if not direct[fid] <= free:
                free.discard(fid)
                changed = True
    for fn in program.functions.values():
        fn.reshape_free = fn.fid in free


def lower(ast: Node) -> LoweredProgram:
    """Lower a parsed program to one FunctionIR per function plus the global init.

    Raises:
        LowerError: on an unresolved identifier or `this` outside a function.
    """
    lowering = _Lowering()
    names, decls = _hoisted(ast)
    lowering.globals.update(names)
    for decl in decls:
        lowering.globals.add(decl.value[0])
    init = FunctionBuilder(lowering, 0, "<global>", (), ast, (), top_level=True)
    for decl in decls:
        lowering.decl_names[decl.value[0]] = lowering.next_fid + decls.index(decl)
    functions = {0: init.build()}
    while lowering.pending:
        fid, node, scopes = lowering.pending.pop(0)
        name, params = node.value
        builder = FunctionBuilder(
            lowering, fid, name or f"<anon{fid}>", params, node.children[0], scopes, False
        )
        functions[fid] = builder.build()
    program = LoweredProgram(
        dict(sorted(functions.items())), 0, tuple(sorted(lowering.globals))
    )
    _compute_reshape_free(program, lowering)
    return program


def verify(fn: FunctionIR) -> list[str]:
    """All violations of the FunctionIR invariants; empty when well formed."""
    violations = []
    ids = [b.block_id for b in fn.blocks]
    known = set(ids)
    if len(ids) != len(known):
        violations.append("duplicate block ids")
    if fn.entry_block_id not in known:
        violations.append(f"entry block b{fn.entry_block_id} missing")
        return violations
    for block in fn.blocks:
        extra = [i for i in block.instrs if isinstance(i, TERMINATOR_TYPES)]
        if extra:
            violations.append(f"b{block.block_id}: multiple terminators")
        if block.term is None:
            violations.append(f"b{block.block_id}: missing terminator")
            continue
        for succ in block.term.successors():
            if succ not in known:
                violations.append(f"b{block.block_id}: branch to missing block b{succ}")
    if violations:
        return violations

    preds: dict[int, list[int]] = {i: [] for i in ids}
    for block in fn.blocks:
        for succ in block.term.successors():
            preds[succ].append(block.block_id)
    if preds[fn.entry_block_id]:
        violations.append("entry block has predecessors")

    everything = frozenset(range(fn.local_slots))
    entry_defs = frozenset({FunctionIR.THIS_REG, *fn.param_regs})
    by_id = {b.block_id: b for b in fn.blocks}

    def edge_out(block: BasicBlock, into: frozenset, succ: int) -> frozenset:
        defined = set(into)
        for ins in block.instrs:
            if ins.dst is not None:
                defined.add(ins.dst)
        term = block.term
        if isinstance(term, Call) and term.dst is not None and succ == term.cont:
            defined.add(term.dst)
        if isinstance(term, OverflowTest) and succ == term.if_ok:
            defined.add(term.dst)
        return frozenset(defined)

    defined_in = {i: everything for i in ids}
    defined_in[fn.entry_block_id] = entry_defs
    changed = True
    while changed:
        changed = False
        for block in fn.blocks:
            if block.block_id == fn.entry_block_id:
                continue
            incoming = [edge_out(by_id[p], defined_in[p], block.block_id) for p in preds[block.block_id]]
            new = frozenset.intersection(*incoming) if incoming else everything
            if new != defined_in[block.block_id]:
                defined_in[block.block_id] = new
                changed = True
    for block in fn.blocks:
        defined = set(defined_in[block.block_id])
        for ins in block.instrs:
            for arg in ins.args:
                if arg not in defined:
                    violations.append(f"b{block.block_id}: use of r{arg} before definition")
            if ins.dst is not None:
                defined.add(ins.dst)
        for arg in block.term.uses():
            if arg not in defined:
                violations.append(f"b{block.block_id}: use of r{arg} before definition")
    return violations


def dump(program: LoweredProgram) -> str:
    """Textual IR, one block per paragraph, in a stable order."""
    paragraphs = []
    for fn in program.functions.values():
        params = ", ".join(fn.params)
        paragraphs.append(
            f"function {fn.name} #{fn.fid} ({params}) regs={fn.local_slots}"
            f" reshape_free={str(fn.reshape_free).lower()}"
        )
        for block in fn.blocks:
            live = " ".join(f"r{r}" for r in sorted(block.live_in))
            lines = [f"b{block.block_id}:{' (entry)' if block.block_id == fn.entry_block_id else ''} live-in [{live}]"]
            lines.extend(f"  {ins}" for ins in block.instrs)
            lines.append(f"  {block.term}")
            paragraphs.append("\n".join(lines))
    return "\n\n".join(paragraphs) + "\n"
