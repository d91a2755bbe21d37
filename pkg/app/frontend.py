"""Lexer, parser and unparser for the corpus language.

The corpus language is a small JavaScript subset: function declarations and
named function expressions, `var`, `if/else`, `while`, `return`, fatal
`throw`, object and array literals, `new`, property and index access, method
calls and the usual arithmetic, comparison and logical operators. Semicolons
are mandatory.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Union

from app.exceptions import LexError, ParseError

KEYWORDS = frozenset(
    {"function", "var", "if", "else", "while", "return", "throw", "new",
     "this", "null", "true", "false"}
)
PUNCTUATORS = (
    "==", "!=", "<=", ">=", "&&", "||", "+=", "-=",
    "+", "-", "*", "/", "%", "<", ">", "=", "!",
    "(", ")", "{", "}", "[", "]", ";", ",", ".", ":",
)
INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class SourceProgram:
    path: str
    source: str

    def __post_init__(self) -> None:
        normalized = self.source.replace("\r\n", "\n").replace("\r", "\n")
        object.__setattr__(self, "source", normalized)
        if not normalized.strip():
            raise LexError(1, 1, "empty program")

    @classmethod
    def from_path(cls, path: Union[str, Path]) -> "SourceProgram":
        path = Path(path)
        return cls(str(path), path.read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Token:
    kind: str
    value: Any
    line: int
    column: int
    integral: bool = field(default=False, compare=False)

    def __repr__(self) -> str:
        return f"{self.kind}({self.value!r})@{self.line}:{self.column}"


@dataclass(frozen=True)
class Node:
    """An AST node. Source locations do not take part in equality."""

    kind: str
    children: tuple["Node", ...] = ()
    value: Any = None
    line: int = field(default=0, compare=False)
    column: int = field(default=0, compare=False)

    def walk(self) -> Iterator["Node"]:
        yield self
        for child in self.children:
            yield from child.walk()

    def __repr__(self) -> str:
        inner = ", ".join(repr(c) for c in self.children)
        value = "" if self.value is None else f" {self.value!r}"
        return f"{self.kind}{value}({inner})"


AstNode = Node


def tokenize(program: Union[SourceProgram, str]) -> list[Token]:
    """Split a program into tokens, ending with an `eof` token.

    Raises:
        LexError: on an illegal character or an unterminated string/comment.
    """
    text = program.source if isinstance(program, SourceProgram) else program
    tokens: list[Token] = []
    pos, line, col = 0, 1, 1
    n = len(text)

    def advance(count: int) -> None:
        nonlocal pos, line, col
        for ch in text[pos : pos + count]:
            if ch == "\n":
                line += 1
                col = 1
            else:
                col += 1
        pos += count

    while pos < n:
        ch = text[pos]
        if ch in " \t\n\f\v":
            advance(1)
            continue
        if text.startswith("//", pos):
            end = text.find("\n", pos)
            advance((n if end < 0 else end) - pos)
            continue
        if text.startswith("/*", pos):
            end = text.find("*/", pos + 2)
            if end < 0:
                raise LexError(line, col, "unterminated comment")
            advance(end + 2 - pos)
            continue

        start_line, start_col = line, col
        if ch.isdigit() or (ch == "." and pos + 1 < n and text[pos + 1].isdigit()):
            end = pos
            while end < n and text[end].isdigit():
                end += 1
            is_float = False
            if end < n and text[end] == ".":
                is_float = True
                end += 1
                while end < n and text[end].isdigit():
                    end += 1
            if end < n and text[end] in "eE":
                exp = end + 1
                if exp < n and text[exp] in "+-":
                    exp += 1
                if exp < n and text[exp].isdigit():
                    is_float = True
                    end = exp
                    while end < n and text[end].isdigit():
                        end += 1
            literal = text[pos:end]
            if end < n and (text[end].isalpha() or text[end] == "_"):
                raise LexError(line, col + end - pos, f"malformed number {literal + text[end]!r}")
            if not is_float and int(literal) <= INT32_MAX:
                tokens.append(Token("int", int(literal), start_line, start_col))
            else:
                tokens.append(Token("float", float(literal), start_line, start_col, integral=not is_float))
            advance(end - pos)
            continue

        if ch.isalpha() or ch in "_$":
            end = pos
            while end < n and (text[end].isalnum() or text[end] in "_$"):
                end += 1
            word = text[pos:end]
            kind = "kw" if word in KEYWORDS else "ident"
            tokens.append(Token(kind, word, start_line, start_col))
            advance(end - pos)
            continue

        if ch in "'\"":
            chars = []
            end = pos + 1
            while True:
                if end >= n or text[end] == "\n":
                    raise LexError(start_line, start_col, "unterminated string")
                c = text[end]
                if c == ch:
                    break
                if c == "\\":
                    if end + 1 >= n:
                        raise LexError(start_line, start_col, "unterminated string")
                    esc = text[end + 1]
                    if esc == "u":
                        digits = text[end + 2 : end + 6]
                        if len(digits) != 4 or not all(d in "0123456789abcdefABCDEF" for d in digits):
                            raise LexError(line, col + end - pos, "bad unicode escape")
                        chars.append(chr(int(digits, 16)))
                        end += 6
                        continue
                    chars.append({"n": "\n", "t": "\t", "r": "\r", "0": "\0"}.get(esc, esc))
                    end += 2
                    continue
                chars.append(c)
                end += 1
            tokens.append(Token("string", "".join(chars), start_line, start_col))
            advance(end + 1 - pos)
            continue

        for punct in PUNCTUATORS:
            if text.startswith(punct, pos):
                tokens.append(Token("punct", punct, start_line, start_col))
                advance(len(punct))
                break
        else:
            raise LexError(line, col, f"illegal character {ch!r}")

    tokens.append(Token("eof", None, line, col))
    return tokens


class Parser:
    """Recursive descent parser producing `Node` trees."""

    def __init__(self, tokens: list[Token]) -> None:
        self.tokens = tokens
        self.pos = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def _next(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def _is(self, kind: str, value: Any = None) -> bool:
        tok = self.tok
        return tok.kind == kind and (value is None or tok.value == value)

    def _accept(self, kind: str, value: Any = None) -> Optional[Token]:
        if self._is(kind, value):
            return self._next()
        return None

    def _expect(self, kind: str, value: Any = None) -> Token:
        if self._is(kind, value):
            return self._next()
        raise ParseError(self.tok.line, self.tok.column, [repr(value) if value else kind])

    def _fail(self, *expected: str) -> ParseError:
        return ParseError(self.tok.line, self.tok.column, expected)

    def _node(self, kind: str, tok: Token, children=(), value: Any = None) -> Node:
        return Node(kind, tuple(children), value, tok.line, tok.column)

    def _number(self, tok: Token, value: int) -> Node:
        """An int32 literal, or a float64 one outside the int32 range."""
        if INT32_MIN <= value <= INT32_MAX:
            return self._node("IntLit", tok, value=value)
        return self._node("FloatLit", tok, value=float(value))

    def _negated(self, tok: Token, lit: Token) -> Node:
        if lit.kind == "int" or (lit.integral and lit.value == -INT32_MIN):
            return self._number(tok, -int(lit.value))
        return self._node("FloatLit", tok, value=-lit.value)

    def _peek(self, offset: int) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def parse_program(self) -> Node:
        start = self.tok
        body = []
        while not self._is("eof"):
            body.append(self.statement())
        return self._node("Program", start, body)

    def statement(self) -> Node:
        tok = self.tok
        if self._is("kw", "function"):
            return self.function(declaration=True)
        if self._accept("kw", "var"):
            name = self._expect("ident").value
            init = []
            if self._accept("punct", "="):
                init.append(self.expression())
            self._expect("punct", ";")
            return self._node("VarDecl", tok, init, name)
        if self._accept("kw", "if"):
            self._expect("punct", "(")
            cond = self.expression()
            self._expect("punct", ")")
            parts = [cond, self.statement()]
            if self._accept("kw", "else"):
                parts.append(self.statement())
            return self._node("If", tok, parts)
        if self._accept("kw", "while"):
            self._expect("punct", "(")
            cond = self.expression()
            self._expect("punct", ")")
            return self._node("While", tok, [cond, self.statement()])
        if self._accept("kw", "return"):
            value = [] if self._is("punct", ";") else [self.expression()]
            self._expect("punct", ";")
            return self._node("Return", tok, value)
        if self._accept("kw", "throw"):
            value = self.expression()
            self._expect("punct", ";")
            return self._node("Throw", tok, [value])
        if self._is("punct", "{"):
            return self.block()
        expr = self.expression()
        self._expect("punct", ";")
        return self._node("ExprStmt", tok, [expr])

    def block(self) -> Node:
        tok = self._expect("punct", "{")
        body = []
        while not self._accept("punct", "}"):
            if self._is("eof"):
                raise self._fail("'}'")
            body.append(self.statement())
        return self._node("Block", tok, body)

    def function(self, declaration: bool) -> Node:
        tok = self._expect("kw", "function")
        name_tok = self._accept("ident")
        if declaration and name_tok is None:
            raise self._fail("ident")
        self._expect("punct", "(")
        params = []
        if not self._is("punct", ")"):
            params.append(self._expect("ident").value)
            while self._accept("punct", ","):
                params.append(self._expect("ident").value)
        self._expect("punct", ")")
        body = self.block()
        name = name_tok.value if name_tok else None
        kind = "FunctionDecl" if declaration else "FunctionExpr"
        return self._node(kind, tok, [body], (name, tuple(params)))

    def expression(self) -> Node:
        return self.assignment()

    def assignment(self) -> Node:
        tok = self.tok
        target = self.binary(0)
        if self._is("punct", "=") or self._is("punct", "+=") or self._is("punct", "-="):
            op = self._next().value
            value = self.assignment()
            if op != "=":
                value = self._compound(target, op[0], value, tok)
            if target.kind == "Ident":
                return self._node("Assign", tok, [value], target.value)
            if target.kind == "PropRead":
                return self._node("PropWrite", tok, [target.children[0], value], target.value)
            if target.kind == "IndexRead":
                return self._node("IndexWrite", tok, [*target.children, value])
            raise ParseError(tok.line, tok.column, ["assignable expression"])
        return target

    def _compound(self, target: Node, op: str, value: Node, tok: Token) -> Node:
        simple = target.kind == "Ident" or (
            target.kind == "PropRead" and target.children[0].kind in ("Ident", "This")
        )
        if not simple:
            raise ParseError(tok.line, tok.column, ["identifier or property target"])
        return self._node("BinOp", tok, [target, value], op)

    BINARY_LEVELS = (
        ("||",),
        ("&&",),
        ("==", "!="),
        ("<", "<=", ">", ">="),
        ("+", "-"),
        ("*", "/", "%"),
    )

    def binary(self, level: int) -> Node:
        if level == len(self.BINARY_LEVELS):
            return self.unary()
        ops = self.BINARY_LEVELS[level]
        left = self.binary(level + 1)
        while self.tok.kind == "punct" and self.tok.value in ops:
            tok = self._next()
            right = self.binary(level + 1)
            left = Node("BinOp", (left, right), tok.value, left.line, left.column)
        return left

    def unary(self) -> Node:
        tok = self.tok
        if self._accept("punct", "-"):
            lit, after = self.tok, self._peek(1)
            if lit.kind in ("int", "float") and not (after.kind == "punct" and after.value in (".", "[", "(")):
                self._next()
                return self._negated(tok, lit)
            operand = self.unary()
            if operand.kind == "IntLit":
                return self._number(tok, -operand.value)
            if operand.kind == "FloatLit":
                return self._node("FloatLit", tok, value=-operand.value)
            return self._node("UnOp", tok, [operand], "-")
        if self._accept("punct", "!"):
            return self._node("UnOp", tok, [self.unary()], "!")
        return self.postfix(self.primary())

    def arguments(self) -> list[Node]:
        self._expect("punct", "(")
        args = []
        if not self._is("punct", ")"):
            args.append(self.expression())
            while self._accept("punct", ","):
                args.append(self.expression())
        self._expect("punct", ")")
        return args

    def postfix(self, expr: Node, allow_calls: bool = True) -> Node:
        while True:
            if self._accept("punct", "."):
                name = self._expect("ident").value
                if allow_calls and self._is("punct", "("):
                    args = self.arguments()
                    expr = Node("MethodCall", (expr, *args), name, expr.line, expr.column)
                else:
                    expr = Node("PropRead", (expr,), name, expr.line, expr.column)
            elif self._accept("punct", "["):
                index = self.expression()
                self._expect("punct", "]")
                expr = Node("IndexRead", (expr, index), None, expr.line, expr.column)
            elif allow_calls and self._is("punct", "("):
                args = self.arguments()
                expr = Node("Call", (expr, *args), None, expr.line, expr.column)
            else:
                return expr

    def primary(self) -> Node:
        tok = self.tok
        if tok.kind == "int":
            self._next()
            return self._node("IntLit", tok, value=tok.value)
        if tok.kind == "float":
            self._next()
            return self._node("FloatLit", tok, value=tok.value)
        if tok.kind == "string":
            self._next()
            return self._node("StrLit", tok, value=tok.value)
        if tok.kind == "ident":
            self._next()
            return self._node("Ident", tok, value=tok.value)
        if tok.kind == "kw":
            if tok.value in ("true", "false"):
                self._next()
                return self._node("BoolLit", tok, value=tok.value == "true")
            if tok.value == "null":
                self._next()
                return self._node("NullLit", tok)
            if tok.value == "this":
                self._next()
                return self._node("This", tok)
            if tok.value == "function":
                return self.function(declaration=False)
            if tok.value == "new":
                self._next()
                callee = self.postfix(self.primary(), allow_calls=False)
                args = self.arguments() if self._is("punct", "(") else []
                return self._node("New", tok, [callee, *args])
        if self._accept("punct", "("):
            expr = self.expression()
            self._expect("punct", ")")
            return expr
        if self._accept("punct", "{"):
            keys, values = [], []
            if not self._is("punct", "}"):
                while True:
                    key_tok = self._next()
                    if key_tok.kind not in ("ident", "string", "kw"):
                        raise ParseError(key_tok.line, key_tok.column, ["property name"])
                    keys.append(key_tok.value)
                    self._expect("punct", ":")
                    values.append(self.expression())
                    if not self._accept("punct", ","):
                        break
            self._expect("punct", "}")
            return self._node("ObjectLit", tok, values, tuple(keys))
        if self._accept("punct", "["):
            elems = []
            if not self._is("punct", "]"):
                elems.append(self.expression())
                while self._accept("punct", ","):
                    elems.append(self.expression())
            self._expect("punct", "]")
            return self._node("ArrayLit", tok, elems)
        raise self._fail("expression")


def parse(tokens: list[Token]) -> Node:
    """Parse a token sequence into a `Program` node.

    Raises:
        ParseError: with the position and the set of expected tokens.
    """
    return Parser(tokens).parse_program()


def parse_source(program: Union[SourceProgram, str]) -> Node:
    return parse(tokenize(program))


def _quote(text: str) -> str:
    return json.dumps(text, ensure_ascii=False)


def _number(value: float) -> str:
    if value != value:
        return "(0.0 / 0.0)"
    if value in (float("inf"), float("-inf")):
        return "1e999" if value > 0 else "-1e999"
    return repr(value)


def unparse(node: Node) -> str:
    """Source text for a node; parsing it yields a structurally equal tree."""
    kind, ch = node.kind, node.children
    if kind == "Program":
        return "\n".join(unparse(c) for c in ch)
    if kind in ("FunctionDecl", "FunctionExpr"):
        name, params = node.value
        text = f"function {name or ''}({', '.join(params)}) {unparse(ch[0])}"
        return text if kind == "FunctionDecl" else f"({text})"
    if kind == "Block":
        return "{\n" + "\n".join(unparse(c) for c in ch) + "\n}"
    if kind == "VarDecl":
        init = f" = {unparse(ch[0])}" if ch else ""
        return f"var {node.value}{init};"
    if kind == "If":
        text = f"if ({unparse(ch[0])}) {unparse(ch[1])}"
        return text + (f" else {unparse(ch[2])}" if len(ch) > 2 else "")
    if kind == "While":
        return f"while ({unparse(ch[0])}) {unparse(ch[1])}"
    if kind == "Return":
        return f"return {unparse(ch[0])};" if ch else "return;"
    if kind == "Throw":
        return f"throw {unparse(ch[0])};"
    if kind == "ExprStmt":
        return f"{unparse(ch[0])};"
    if kind == "IntLit":
        return str(node.value)
    if kind == "FloatLit":
        return _number(node.value)
    if kind == "StrLit":
        return _quote(node.value)
    if kind == "BoolLit":
        return "true" if node.value else "false"
    if kind == "NullLit":
        return "null"
    if kind == "This":
        return "this"
    if kind == "Ident":
        return node.value
    if kind == "BinOp":
        return f"({unparse(ch[0])} {node.value} {unparse(ch[1])})"
    if kind == "UnOp":
        return f"({node.value}{unparse(ch[0])})"
    if kind == "Assign":
        return f"({node.value} = {unparse(ch[0])})"
    if kind == "PropRead":
        return f"{unparse(ch[0])}.{node.value}"
    if kind == "PropWrite":
        return f"({unparse(ch[0])}.{node.value} = {unparse(ch[1])})"
    if kind == "IndexRead":
        return f"{unparse(ch[0])}[{unparse(ch[1])}]"
    if kind == "IndexWrite":
        return f"({unparse(ch[0])}[{unparse(ch[1])}] = {unparse(ch[2])})"
    if kind == "Call":
        return f"{unparse(ch[0])}({', '.join(unparse(a) for a in ch[1:])})"
    if kind == "MethodCall":
        return f"{unparse(ch[0])}.{node.value}({', '.join(unparse(a) for a in ch[1:])})"
    if kind == "New":
        return f"new ({unparse(ch[0])})({', '.join(unparse(a) for a in ch[1:])})"
    if kind == "ObjectLit":
        fields = ", ".join(f"{_quote(k)}: {unparse(v)}" for k, v in zip(node.value, ch))
        return "({" + fields + "})"
    if kind == "ArrayLit":
        return "[" + ", ".join(unparse(c) for c in ch) + "]"
    raise ValueError(f"cannot unparse {kind}")
