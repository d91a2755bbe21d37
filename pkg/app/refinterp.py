"""Untyped reference interpreter over the AST.

Every polymorphic operator dispatches naively on its operands' tags, walking
the same dispatch tables the lowering uses and counting each test it performs.
The count therefore equals the dynamic tag tests of the virtual machine's
baseline mode for the same program.
"""

import logging
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional

from app.exceptions import Halt, LowerError, StackOverflow
from app.frontend import Node
from app.ir import static_tag, tag_matches
from app.runtime import (
    BINARY_DISPATCH,
    BUILTINS,
    INDEX_DISPATCH,
    INDEX_WRITE_DISPATCH,
    NEGATE_DISPATCH,
    PROP_WRITE_DISPATCH,
    TRUTH_DISPATCH,
    UNDEFINED,
    Builtins,
    Closure,
    Dispatch,
    Heap,
    Invoker,
    JSArray,
    Value,
    array_read,
    array_write,
    binary_action,
    call,
    display,
    has_tag,
    int32_op,
    prop_dispatch,
    truthy,
)
from app.typesys import CONST, NULL, TypeTag

logger = logging.getLogger(__name__)

RECURSION_HEADROOM = 40


@dataclass
class InterpResult:
    result: Value
    implicit_tests: int
    output: list[str] = field(default_factory=list)

    @property
    def display(self) -> str:
        return display(self.result)


class _Return(Exception):
    def __init__(self, value: Value) -> None:
        self.value = value


def _hoisted(body: Node) -> tuple[list[str], list[Node]]:
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


class Interpreter(Invoker):
    def __init__(
        self,
        ast: Node,
        output: Optional[Callable[[str], None]] = None,
        max_call_depth: int = 10_000,
    ) -> None:
        self.ast = ast
        self.heap = Heap()
        self.builtins = Builtins(output)
        self.tests = 0
        self.depth = 0
        self.max_call_depth = max_call_depth
        self.functions: dict[int, Node] = {}
        self.fids: dict[int, int] = {}

    # Test counting.

    def select(self, value: Value, known: Optional[TypeTag], tags) -> Optional[int]:
        for i, tag in enumerate(tags):
            if known is not None:
                if tag_matches(known, tag):
                    return i
                continue
            self.tests += 1
            if has_tag(value, tag):
                return i
        return None

    def binary(self, table: Dispatch, op: str, a, ta, b, tb) -> str:
        left = self.select(a, ta, [arm[0] for arm in table.arms])
        if left is None:
            return table.otherwise
        _, rights, right_miss = table.arms[left]
        right = self.select(b, tb, [r[0] for r in rights])
        return right_miss if right is None else rights[right][1]

    def truth(self, value: Value, known: Optional[TypeTag]) -> bool:
        if known == CONST:
            return value is True
        arm = self.select(value, known, [t for t, _ in TRUTH_DISPATCH])
        if arm is None:
            return True
        if TRUTH_DISPATCH[arm][1] == "False":
            return False
        return truthy(value)

    # Programs and functions.

    def closure(self, node: Node) -> Closure:
        fid = self.fids.get(id(node))
        if fid is None:
            fid = self.fids[id(node)] = len(self.fids) + 1
            self.functions[fid] = node
        return Closure(fid, node)

    def run(self) -> Value:
        names, decls = _hoisted(self.ast)
        globals_ = self.heap.globals
        for name in BUILTINS:
            globals_[name] = Closure(name)
        for name in names:
            globals_.setdefault(name, UNDEFINED)
        for decl in decls:
            globals_[decl.value[0]] = self.closure(decl)
        scope = _Scope(None, globals_, top_level=True)
        for stmt in self.ast.children:
            self.statement(stmt, scope)
        return UNDEFINED

    def arity(self, callee: Closure) -> int:
        return len(callee.env.value[1])

    def invoke(self, callee: Closure, this: Value, args: list) -> Value:
        node = callee.env
        name, params = node.value
        body = node.children[0]
        if self.depth >= self.max_call_depth:
            raise StackOverflow(f"call depth exceeds {self.max_call_depth}")
        names, decls = _hoisted(body)
        local = dict(zip(params, args))
        for var in names:
            local.setdefault(var, UNDEFINED)
        for decl in decls:
            local[decl.value[0]] = self.closure(decl)
        scope = _Scope(local, self.heap.globals, this=this)
        self.depth += 1
        try:
            for stmt in body.children:
                self.statement(stmt, scope)
        except _Return as ret:
            return ret.value
        finally:
            self.depth -= 1
        return UNDEFINED

    # Statements.

    def statement(self, node: Node, scope: "_Scope") -> None:
        kind = node.kind
        if kind == "ExprStmt":
            self.expr(node.children[0], scope)
        elif kind == "VarDecl":
            if node.children:
                scope.store(node, node.value, self.expr(node.children[0], scope))
        elif kind == "Block":
            for stmt in node.children:
                self.statement(stmt, scope)
        elif kind == "If":
            if self.condition(node.children[0], scope):
                self.statement(node.children[1], scope)
            elif len(node.children) > 2:
                self.statement(node.children[2], scope)
        elif kind == "While":
            while self.condition(node.children[0], scope):
                self.statement(node.children[1], scope)
        elif kind == "Return":
            if scope.top_level:
                raise LowerError(node.line, node.column, "return outside function")
            value = self.expr(node.children[0], scope) if node.children else UNDEFINED
            raise _Return(value)
        elif kind == "Throw":
            value = self.expr(node.children[0], scope)
            raise Halt(f"uncaught throw: {display(value)}")
        elif kind != "FunctionDecl":
            raise LowerError(node.line, node.column, f"unexpected statement {kind}")

    def condition(self, node: Node, scope: "_Scope") -> bool:
        return self.truth(self.expr(node, scope), static_tag(node))

    # Expressions.

    def expr(self, node: Node, scope: "_Scope") -> Value:
        kind = node.kind
        ch = node.children
        if kind in ("IntLit", "FloatLit", "StrLit"):
            return float(node.value) if kind == "FloatLit" else node.value
        if kind == "BoolLit":
            return bool(node.value)
        if kind == "NullLit":
            return None
        if kind == "This":
            if scope.top_level:
                raise LowerError(node.line, node.column, "`this` outside function")
            return scope.this
        if kind == "Ident":
            return scope.load(node, node.value)
        if kind == "Assign":
            value = self.expr(ch[0], scope)
            scope.store(node, node.value, value)
            return value
        if kind == "FunctionExpr":
            return self.closure(node)
        if kind == "ObjectLit":
            values = [self.expr(c, scope) for c in ch]
            obj = self.heap.alloc_object()
            for key, value in zip(node.value, values):
                self.heap.set_prop(obj, key, value)
            return obj
        if kind == "ArrayLit":
            return JSArray([self.expr(c, scope) for c in ch])
        if kind == "UnOp":
            value = self.expr(ch[0], scope)
            known = static_tag(ch[0])
            if node.value == "!":
                return not self.truth(value, known)
            arm = self.select(value, known, [t for t, _ in NEGATE_DISPATCH])
            if arm is None:
                raise Halt("unsupported operand for unary -")
            if NEGATE_DISPATCH[arm][1] == "NegI32":
                result = int32_op("NegI32", value, value)
                return result if result is not None else -float(value)
            return -float(value)
        if kind == "BinOp":
            return self.binop(node, scope)
        if kind == "PropRead":
            obj = self.expr(ch[0], scope)
            return self.prop_read(obj, static_tag(ch[0]), node.value)
        if kind == "PropWrite":
            obj = self.expr(ch[0], scope)
            value = self.expr(ch[1], scope)
            if self.select(obj, static_tag(ch[0]), [t for t, _ in PROP_WRITE_DISPATCH]) is None:
                raise Halt(f"cannot write property {node.value!r} of this value")
            self.heap.set_prop(obj, node.value, value)
            return value
        if kind in ("IndexRead", "IndexWrite"):
            arr = self.expr(ch[0], scope)
            idx = self.expr(ch[1], scope)
            write = kind == "IndexWrite"
            value = self.expr(ch[2], scope) if write else None
            table = INDEX_WRITE_DISPATCH if write else INDEX_DISPATCH
            action = self.binary(table, "[]", arr, static_tag(ch[0]), idx, static_tag(ch[1]))
            if action == "ArrayRead":
                return array_read(arr, idx)
            if action == "ArrayWrite":
                array_write(arr, idx, value)
                return value
            raise Halt("unsupported index operands")
        if kind == "Call":
            callee = self.expr(ch[0], scope)
            args = [self.expr(a, scope) for a in ch[1:]]
            return call(callee, UNDEFINED, args, self)
        if kind == "MethodCall":
            obj = self.expr(ch[0], scope)
            method = self.prop_read(obj, static_tag(ch[0]), node.value)
            args = [self.expr(a, scope) for a in ch[1:]]
            return call(method, obj, args, self)
        if kind == "New":
            callee = self.expr(ch[0], scope)
            args = [self.expr(a, scope) for a in ch[1:]]
            obj = self.heap.alloc_object()
            call(callee, obj, args, self)
            return obj
        raise LowerError(node.line, node.column, f"unexpected expression {kind}")

    def prop_read(self, obj: Value, known: Optional[TypeTag], name: str) -> Value:
        arms = prop_dispatch(name)
        arm = self.select(obj, known, [t for t, _ in arms])
        if arm is None:
            raise Halt(f"cannot read property {name!r} of this value")
        action = arms[arm][1]
        if action == "ArrayLength":
            return len(obj.elems)
        if action == "StrLength":
            return len(obj)
        return self.heap.get_prop(obj, name)

    def binop(self, node: Node, scope: "_Scope") -> Value:
        op = node.value
        left, right = node.children
        if op in ("&&", "||"):
            first = self.truth(self.expr(left, scope), static_tag(left))
            if first == (op == "||"):
                return first
            return self.truth(self.expr(right, scope), static_tag(right))
        a = self.expr(left, scope)
        b = self.expr(right, scope)
        ta, tb = static_tag(left), static_tag(right)
        if op in ("==", "!=") and NULL in (ta, tb):
            other, known = (b, tb) if ta == NULL else (a, ta)
            if known is not None:
                is_null = known == NULL
            else:
                self.tests += 1
                is_null = has_tag(other, NULL)
            return is_null == (op == "==")
        action = self.binary(BINARY_DISPATCH[op], op, a, ta, b, tb)
        return binary_action(action, op, a, b)


class _Scope:
    __slots__ = ("locals", "globals", "this", "top_level")

    def __init__(self, local, globals_, this: Value = UNDEFINED, top_level: bool = False) -> None:
        self.locals = local
        self.globals = globals_
        self.this = this
        self.top_level = top_level

    def load(self, node: Node, name: str) -> Value:
        if self.locals is not None and name in self.locals:
            return self.locals[name]
        if name in self.globals:
            return self.globals[name]
        raise LowerError(node.line, node.column, f"unresolved identifier {name!r}")

    def store(self, node: Node, name: str, value: Value) -> None:
        if self.locals is not None and name in self.locals:
            self.locals[name] = value
        elif name in self.globals:
            self.globals[name] = value
        else:
            raise LowerError(node.line, node.column, f"unresolved identifier {name!r}")


def interpret(
    ast: Node,
    args: Optional[list] = None,
    *,
    entry: Optional[str] = None,
    output: Optional[Callable[[str], None]] = None,
    max_call_depth: int = 10_000,
) -> InterpResult:
    """Evaluate a program, then optionally call one of its global functions.

    Returns:
        The result value (undefined unless `entry` is given), the number of
        implicit tag tests performed, and the printed lines.
    """
    interp = Interpreter(ast, output, max_call_depth)
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, max_call_depth * RECURSION_HEADROOM))
    try:
        result = interp.run()
        if entry is not None:
            result = call(interp.heap.globals.get(entry), UNDEFINED, list(args or []), interp)
    finally:
        sys.setrecursionlimit(limit)
    return InterpResult(result, interp.tests, list(interp.builtins.lines))
