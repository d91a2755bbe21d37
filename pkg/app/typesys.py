"""Type tags and the versioning contexts built from them.

The tag lattice is flat except for closures: every concrete tag sits directly
below `unknown`, and a closure of known identity sits below the closure tag of
unknown identity.
"""

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Optional, Union

from app.exceptions import RefineConflict

FunctionId = Union[int, str]


@dataclass(frozen=True, slots=True)
class TypeTag:
    """A first-degree type. `fid` is set only for closures of known identity."""

    kind: str
    fid: Optional[FunctionId] = None

    @property
    def name(self) -> str:
        """The tag as spelled in reports (`int32`, `closure/id3`, ...)."""
        if self.kind == "closure" and self.fid is not None:
            if isinstance(self.fid, str):
                return f"closure/{self.fid}"
            return f"closure/id{self.fid}"
        return self.kind

    @property
    def is_closure(self) -> bool:
        return self.kind == "closure"

    @property
    def is_known_closure(self) -> bool:
        return self.kind == "closure" and self.fid is not None

    def __repr__(self) -> str:
        return self.name


INT32 = TypeTag("int32")
FLOAT64 = TypeTag("float64")
NULL = TypeTag("null")
CONST = TypeTag("const")
STRING = TypeTag("string")
ARRAY = TypeTag("array")
CLOSURE = TypeTag("closure")
OBJECT = TypeTag("object")
UNKNOWN = TypeTag("unknown")

BASIC_TAGS = (INT32, FLOAT64, NULL, CONST, STRING, ARRAY, CLOSURE, OBJECT, UNKNOWN)
SHAPED_TAGS = frozenset({"object", "array", "closure"})


def closure_known(fid: FunctionId) -> TypeTag:
    """Closure tag carrying the identity of the function."""
    return TypeTag("closure", fid)


def leq(a: TypeTag, b: TypeTag) -> bool:
    """Lattice order: is `a` at least as precise as `b`?"""
    if a == b or b == UNKNOWN:
        return True
    return b == CLOSURE and a.is_known_closure


def join(a: TypeTag, b: TypeTag) -> TypeTag:
    """Least upper bound of two tags."""
    if a == b:
        return a
    if a.is_closure and b.is_closure:
        return CLOSURE
    return UNKNOWN


@dataclass(frozen=True, slots=True)
class Entry:
    tag: TypeTag
    shape: Optional[int] = None


class TypeContext(Mapping[int, Entry]):
    """Immutable map from value ids (registers) to what is known about them.

    A missing entry means `unknown`. Every update returns a new context.
    """

    __slots__ = ("_entries", "_key")

    def __init__(self, entries: Optional[Mapping[int, Entry]] = None) -> None:
        self._entries: dict[int, Entry] = dict(entries or {})
        self._key: Optional[bytes] = None

    def __getitem__(self, value: int) -> Entry:
        return self._entries[value]

    def __iter__(self) -> Iterator[int]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TypeContext):
            return NotImplemented
        return self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        return "{" + self.describe() + "}"

    def describe(self, names: Optional[Mapping[int, str]] = None) -> str:
        """Human readable listing, ordered by value id."""
        parts = []
        for value in sorted(self._entries):
            entry = self._entries[value]
            label = names.get(value, f"r{value}") if names else f"r{value}"
            text = entry.tag.name
            if entry.shape is not None:
                text += f"@S{entry.shape}"
            parts.append(f"{label}: {text}")
        return ", ".join(parts)

    @property
    def key(self) -> bytes:
        if self._key is None:
            self._key = context_key(self)
        return self._key

    def tag(self, value: int) -> TypeTag:
        entry = self._entries.get(value)
        return entry.tag if entry is not None else UNKNOWN

    def shape(self, value: int) -> Optional[int]:
        entry = self._entries.get(value)
        return entry.shape if entry is not None else None

    def assign(
        self, value: int, tag: TypeTag, shape: Optional[int] = None
    ) -> "TypeContext":
        """A definition of `value`: whatever was known before is replaced."""
        entries = dict(self._entries)
        if tag == UNKNOWN:
            entries.pop(value, None)
        else:
            entries[value] = Entry(tag, shape if tag.kind in SHAPED_TAGS else None)
        return TypeContext(entries)

    def forget(self, value: int) -> "TypeContext":
        if value not in self._entries:
            return self
        entries = dict(self._entries)
        del entries[value]
        return TypeContext(entries)

    def restrict(self, live: Iterable[int]) -> "TypeContext":
        """Keep live values only."""
        live = set(live)
        if all(value in live for value in self._entries):
            return self
        return TypeContext({v: e for v, e in self._entries.items() if v in live})

    def without_shapes(self, keep: Optional[int] = None) -> "TypeContext":
        """Drop every shape except the one held by `keep`."""
        if not any(e.shape is not None for v, e in self._entries.items() if v != keep):
            return self
        return TypeContext(
            {
                v: e if e.shape is None or v == keep else Entry(e.tag)
                for v, e in self._entries.items()
            }
        )


def refine(
    ctx: TypeContext, value: int, tag: TypeTag, shape: Optional[int] = None
) -> TypeContext:
    """Narrow what is known about `value`; never widens.

    Raises:
        RefineConflict: when the new tag and the known tag are disjoint.
    """
    if tag == UNKNOWN and shape is not None:
        raise RefineConflict(f"shape S{shape} given for an unknown tag")
    old = ctx.get(value)
    old_tag = old.tag if old is not None else UNKNOWN
    old_shape = old.shape if old is not None else None
    if leq(tag, old_tag):
        new_tag = tag
    elif leq(old_tag, tag):
        new_tag = old_tag
    else:
        raise RefineConflict(
            f"value r{value}: {old_tag.name} refined to {tag.name}"
        )
    new_shape = shape if shape is not None else old_shape
    if new_tag == old_tag and new_shape == old_shape:
        return ctx
    return ctx.assign(value, new_tag, new_shape)


def context_key(ctx: TypeContext) -> bytes:
    """Canonical encoding of a context, independent of insertion order."""
    parts = []
    for value in sorted(ctx):
        entry = ctx[value]
        shape = "" if entry.shape is None else str(entry.shape)
        parts.append(f"{value}:{entry.tag.name}:{shape}")
    return ";".join(parts).encode("ascii")


EMPTY = TypeContext()
