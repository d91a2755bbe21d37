"""Values, heap objects and the primitive behaviours specialized code runs.

Values are plain Python objects: `int` for int32, `float` for float64, `None`
for null, `True`/`False`/`UNDEFINED` for the miscellaneous constants, `str`,
and the three heap types below. The dispatch tables at the bottom describe,
for every polymorphic operator, the ordered cascade of tag tests a naive
implementation performs; lowering and the reference interpreter both walk
these tables so their test counts agree.
"""

import logging
import math
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

from app.exceptions import DivideByZero, Halt, NotCallable
from app.shapes import Shape, ShapeTable
from app.typesys import (
    ARRAY,
    CONST,
    FLOAT64,
    INT32,
    NULL,
    OBJECT,
    STRING,
    TypeTag,
    closure_known,
)

logger = logging.getLogger(__name__)

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


class Undefined:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "undefined"


UNDEFINED = Undefined()


@dataclass(eq=False, slots=True)
class Closure:
    """A function value. Captured environments are not supported."""

    fid: Union[int, str]
    env: Any = None


@dataclass(eq=False, slots=True)
class JSArray:
    elems: list


@dataclass(eq=False, slots=True)
class HeapObject:
    shape: Shape
    slots: list = field(default_factory=list)


Value = Union[int, float, None, bool, Undefined, str, JSArray, Closure, HeapObject]

_TAG_BY_TYPE = {
    int: INT32,
    float: FLOAT64,
    type(None): NULL,
    bool: CONST,
    Undefined: CONST,
    str: STRING,
    JSArray: ARRAY,
    HeapObject: OBJECT,
}


def tag_of(value: Value) -> TypeTag:
    """Runtime type tag of a value."""
    tag = _TAG_BY_TYPE.get(type(value))
    if tag is not None:
        return tag
    if isinstance(value, Closure):
        return closure_known(value.fid)
    raise TypeError(f"not a VM value: {value!r}")


def has_tag(value: Value, tag: TypeTag) -> bool:
    """Outcome of a tag test against `tag`."""
    if tag.kind == "closure":
        return isinstance(value, Closure) and (tag.fid is None or tag.fid == value.fid)
    return _TAG_BY_TYPE.get(type(value)) == tag


def fits_int32(value: int) -> bool:
    return INT32_MIN <= value <= INT32_MAX


def f64_div(a: float, b: float) -> float:
    if b == 0.0:
        if a == 0.0 or a != a:
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)
    return a / b


def f64_mod(a: float, b: float) -> float:
    if b == 0.0 or math.isinf(a) or a != a or b != b:
        return math.nan
    if math.isinf(b):
        return a
    return math.fmod(a, b)


def int32_op(op: str, a: int, b: int) -> Optional[int]:
    """Int32 arithmetic, or None when the result leaves int32 (or is inexact)."""
    if op == "AddI32":
        r = a + b
    elif op == "SubI32":
        r = a - b
    elif op == "MulI32":
        r = a * b
    elif op == "DivI32":
        if b == 0 or a % b != 0:
            return None
        r = a // b
    elif op == "NegI32":
        r = -a
    else:
        raise ValueError(op)
    return r if fits_int32(r) else None


F64_FALLBACK = {
    "AddI32": "AddF64",
    "SubI32": "SubF64",
    "MulI32": "MulF64",
    "DivI32": "DivF64",
    "NegI32": "NegF64",
}


def f64_op(op: str, a: float, b: float = 0.0) -> float:
    a = float(a)
    b = float(b)
    if op == "AddF64":
        return a + b
    if op == "SubF64":
        return a - b
    if op == "MulF64":
        return a * b
    if op == "DivF64":
        return f64_div(a, b)
    if op == "ModF64":
        return f64_mod(a, b)
    if op == "NegF64":
        return -a
    raise ValueError(op)


def mod_i32(a: int, b: int) -> int:
    if b == 0:
        raise DivideByZero("int32 modulo by zero")
    return int(math.fmod(a, b))


def compare(op: str, a: Union[int, float], b: Union[int, float]) -> bool:
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    raise ValueError(op)


def arith(op: str, a: Value, b: Value = None) -> Value:
    """Run a typed arithmetic instruction, promoting to float64 on overflow.

    Raises:
        DivideByZero: for an int32 `%` by zero.
    """
    if op in F64_FALLBACK:
        r = int32_op(op, a, b)
        return r if r is not None else f64_op(F64_FALLBACK[op], a, b)
    if op == "ModI32":
        return mod_i32(a, b)
    return f64_op(op, a, b)


def truthy(value: Value) -> bool:
    if value is True:
        return True
    if value is False or value is None or value is UNDEFINED:
        return False
    if isinstance(value, (int, float)):
        return value != 0 and value == value
    if isinstance(value, str):
        return value != ""
    return True


def format_number(value: float) -> str:
    if value != value:
        return "NaN"
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    if value.is_integer() and abs(value) < 1e21:
        return str(int(value))
    text = repr(value)
    return re.sub(r"e([+-])0*(\d)", r"e\1\2", text)


def display(value: Value) -> str:
    """The text `print` writes for a value."""
    if value is None:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if value is UNDEFINED:
        return "undefined"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format_number(value)
    if isinstance(value, str):
        return value
    if isinstance(value, JSArray):
        return ",".join(
            "" if e is None or e is UNDEFINED else display(e) for e in value.elems
        )
    if isinstance(value, Closure):
        return "function"
    return "[object Object]"


class Heap:
    """Objects, shapes and globals of one VM instance."""

    def __init__(self) -> None:
        self.shapes = ShapeTable()
        self.globals: dict[str, Value] = {}

    def alloc_object(self) -> HeapObject:
        return HeapObject(self.shapes.root)

    def get_prop(self, obj: HeapObject, name: str) -> Value:
        """Read a property through the object's shape.

        Raises:
            Halt: when the shape has no such property.
        """
        entry = obj.shape.layout.get(name)
        if entry is None:
            raise Halt(f"missing property {name!r}")
        return obj.slots[entry[0]]

    def set_prop(self, obj: HeapObject, name: str, value: Value) -> int:
        """Write a property, moving the object to a new shape when needed.

        Returns:
            The id of the object's shape after the write.
        """
        tag = tag_of(value)
        entry = obj.shape.layout.get(name)
        if entry is None:
            obj.shape = self.shapes.define_property(obj.shape, name, tag)
            obj.slots.append(value)
        else:
            if entry[1] != tag:
                obj.shape = self.shapes.update_property_type(obj.shape, name, tag)
            obj.slots[entry[0]] = value
        return obj.shape.shape_id

    def check_object(self, obj: HeapObject) -> list[str]:
        """Slot tags that disagree with the object's shape."""
        problems = []
        for name, (slot, tag) in obj.shape.layout.items():
            if not has_tag(obj.slots[slot], tag):
                problems.append(f"{name}: slot holds {tag_of(obj.slots[slot]).name}, shape says {tag.name}")
        return problems


def check_callable(callee: Value) -> Closure:
    if not isinstance(callee, Closure):
        raise NotCallable(f"{tag_of(callee).name} value is not callable")
    return callee


def pad_args(args: list, arity: int) -> list:
    """Arguments cut or padded with undefined to exactly `arity` values."""
    return list(args[:arity]) + [UNDEFINED] * (arity - len(args))


def call(callee: Value, this: Value, args: list, via: "Invoker") -> Value:
    """Call a function value through an engine.

    Builtins run directly; a program function runs through `via` with its
    arguments padded to the declared arity.

    Raises:
        NotCallable: when `callee` is not a closure.
    """
    check_callable(callee)
    if isinstance(callee.fid, str):
        return BUILTINS[callee.fid].fn(via.builtins, args)
    return via.invoke(callee, this, pad_args(args, via.arity(callee)))


class Invoker:
    """Anything that can run a program function to completion."""

    builtins: "Builtins"

    def arity(self, callee: Closure) -> int:
        raise NotImplementedError

    def invoke(self, callee: Closure, this: Value, args: list) -> Value:
        raise NotImplementedError


@dataclass(frozen=True)
class Builtin:
    name: str
    result_tag: TypeTag
    fn: Callable[["Builtins", list], Value]


class Builtins:
    """Host functions visible to programs as globals."""

    def __init__(self, output: Optional[Callable[[str], None]] = None) -> None:
        self.lines: list[str] = []
        self._output = output

    def print(self, args: list) -> Value:
        line = display(args[0] if args else UNDEFINED)
        self.lines.append(line)
        if self._output is not None:
            self._output(line)
        return UNDEFINED

    def clock(self, args: list) -> Value:
        return time.monotonic() * 1000.0

    def error(self, args: list) -> Value:
        return display(args[0] if args else UNDEFINED)


BUILTINS = {
    "print": Builtin("print", CONST, Builtins.print),
    "clock": Builtin("clock", FLOAT64, Builtins.clock),
    "Error": Builtin("Error", STRING, Builtins.error),
}


@dataclass(frozen=True)
class Dispatch:
    """Ordered tag-test cascade for an operator.

    Each arm tests the left operand; on a match its inner arms test the right
    operand. Actions name the instruction run once the tags are settled.
    """

    arms: tuple[tuple[TypeTag, tuple[tuple[TypeTag, str], ...], str], ...]
    otherwise: str


def _numeric(i32: str, f64: str, extra=()) -> Dispatch:
    return Dispatch(
        (
            (INT32, ((INT32, i32), (FLOAT64, f64)), "Halt"),
            (FLOAT64, ((INT32, f64), (FLOAT64, f64)), "Halt"),
            *extra,
        ),
        "Halt",
    )


BINARY_DISPATCH = {
    "+": _numeric("AddI32", "AddF64", ((STRING, ((STRING, "StrConcat"),), "Halt"),)),
    "-": _numeric("SubI32", "SubF64"),
    "*": _numeric("MulI32", "MulF64"),
    "/": _numeric("DivI32", "DivF64"),
    "%": _numeric("ModI32", "ModF64"),
    "<": _numeric("CmpI32", "CmpF64"),
    "<=": _numeric("CmpI32", "CmpF64"),
    ">": _numeric("CmpI32", "CmpF64"),
    ">=": _numeric("CmpI32", "CmpF64"),
}
_EQUALITY = Dispatch(
    (
        (INT32, ((INT32, "CmpI32"), (FLOAT64, "CmpF64")), "False"),
        (FLOAT64, ((INT32, "CmpF64"), (FLOAT64, "CmpF64")), "False"),
        (STRING, ((STRING, "StrEq"),), "False"),
    ),
    "RefEq",
)
BINARY_DISPATCH["=="] = _EQUALITY
BINARY_DISPATCH["!="] = _EQUALITY

INDEX_DISPATCH = Dispatch(((ARRAY, ((INT32, "ArrayRead"),), "Halt"),), "Halt")
INDEX_WRITE_DISPATCH = Dispatch(((ARRAY, ((INT32, "ArrayWrite"),), "Halt"),), "Halt")

NEGATE_DISPATCH = ((INT32, "NegI32"), (FLOAT64, "NegF64"))
TRUTH_DISPATCH = (
    (CONST, "ConstTruth"),
    (INT32, "NumTruth"),
    (FLOAT64, "NumTruth"),
    (STRING, "StrTruth"),
    (NULL, "False"),
)
LENGTH_DISPATCH = ((ARRAY, "ArrayLength"), (STRING, "StrLength"), (OBJECT, "GetProp"))
PROP_DISPATCH = ((OBJECT, "GetProp"),)
PROP_WRITE_DISPATCH = ((OBJECT, "PutProp"),)


def prop_dispatch(name: str) -> tuple[tuple[TypeTag, str], ...]:
    return LENGTH_DISPATCH if name == "length" else PROP_DISPATCH


def binary_action(action: str, op: str, a: Value, b: Value) -> Value:
    """Result of a settled binary cascade action."""
    if action in ("AddI32", "SubI32", "MulI32", "DivI32", "ModI32"):
        return arith(action, a, b)
    if action in ("AddF64", "SubF64", "MulF64", "DivF64", "ModF64"):
        return f64_op(action, a, b)
    if action in ("CmpI32", "CmpF64"):
        return compare(op, a, b)
    if action == "StrConcat":
        return a + b
    if action == "StrEq":
        return compare(op, a, b)
    if action == "RefEq":
        return (a is b) if op == "==" else (a is not b)
    if action == "False":
        return op == "!="
    raise Halt(f"unsupported operands for {op}: {tag_of(a).name}, {tag_of(b).name}")


def array_read(arr: JSArray, index: int) -> Value:
    if 0 <= index < len(arr.elems):
        return arr.elems[index]
    return UNDEFINED


def array_write(arr: JSArray, index: int, value: Value) -> None:
    if 0 <= index < len(arr.elems):
        arr.elems[index] = value
    elif index == len(arr.elems):
        arr.elems.append(value)
    else:
        raise Halt(f"array index {index} out of range for length {len(arr.elems)}")
