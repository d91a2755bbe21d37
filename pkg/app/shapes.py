"""Typed object shapes.

A shape describes an object's memory layout (which property lives in which
slot) and also the type tag of every property, including the identity of
methods stored in closures. Shapes form a transition tree rooted at the empty
shape; writing a value whose tag differs from the recorded one moves the
object to a shape identical except for that property's tag.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

from app.exceptions import DuplicateProperty, MissingProperty
from app.typesys import TypeTag

logger = logging.getLogger(__name__)

DEFAULT_ATTRS = frozenset({"writable", "enumerable", "configurable"})


@dataclass(eq=False)
class Shape:
    shape_id: int
    parent: Optional["Shape"]
    prop_name: Optional[str]
    slot_idx: int
    prop_tag: Optional[TypeTag]
    attrs: frozenset = DEFAULT_ATTRS
    transitions: dict[tuple[str, TypeTag], int] = field(default_factory=dict)
    _layout: Optional[dict[str, tuple[int, TypeTag]]] = field(default=None, repr=False)

    @property
    def property_count(self) -> int:
        return 0 if self.parent is None else self.slot_idx + 1

    @property
    def layout(self) -> dict[str, tuple[int, TypeTag]]:
        """Property name to (slot, tag), in slot order."""
        if self._layout is None:
            path = []
            shape = self
            while shape.parent is not None:
                path.append(shape)
                shape = shape.parent
            self._layout = {s.prop_name: (s.slot_idx, s.prop_tag) for s in reversed(path)}
        return self._layout

    def __repr__(self) -> str:
        return f"<Shape S{self.shape_id} {self.describe()}>"

    def describe(self) -> str:
        return "{" + ", ".join(f"{n}: {t.name}" for n, (_, t) in self.layout.items()) + "}"


class ShapeTable:
    """Every shape of one VM instance, interned by (parent, name, tag)."""

    def __init__(self) -> None:
        self.shapes: list[Shape] = []
        self.root = self._new(None, None, 0, None)
        self.retype_count = 0

    def _new(
        self,
        parent: Optional[Shape],
        name: Optional[str],
        slot: int,
        tag: Optional[TypeTag],
    ) -> Shape:
        shape = Shape(len(self.shapes), parent, name, slot, tag)
        self.shapes.append(shape)
        return shape

    def __getitem__(self, shape_id: int) -> Shape:
        return self.shapes[shape_id]

    def __len__(self) -> int:
        return len(self.shapes)

    def define_property(self, s: Shape, name: str, tag: TypeTag) -> Shape:
        """Child shape of `s` holding one more property.

        Raises:
            DuplicateProperty: when `s` already defines `name`.
        """
        if name in s.layout:
            raise DuplicateProperty(f"S{s.shape_id} already defines {name!r}")
        child_id = s.transitions.get((name, tag))
        if child_id is not None:
            return self.shapes[child_id]
        child = self._new(s, name, s.property_count, tag)
        s.transitions[(name, tag)] = child.shape_id
        logger.debug("shape S%d = S%d + %s: %s", child.shape_id, s.shape_id, name, tag.name)
        return child

    def update_property_type(self, s: Shape, name: str, tag: TypeTag) -> Shape:
        """Shape identical to `s` except that property `name` has type `tag`.

        Raises:
            MissingProperty: when `s` does not define `name`.
        """
        layout = s.layout
        if name not in layout:
            raise MissingProperty(f"S{s.shape_id} does not define {name!r}")
        if layout[name][1] == tag:
            return s
        self.retype_count += 1
        shape = self.root
        for prop, (_, prop_tag) in layout.items():
            shape = self.define_property(shape, prop, tag if prop == name else prop_tag)
        return shape

    def lookup(self, s: Shape, name: str) -> Optional[tuple[int, TypeTag]]:
        """Slot and tag of `name`, or None when the property is missing."""
        shape = s
        while shape.parent is not None:
            if shape.prop_name == name:
                return shape.slot_idx, shape.prop_tag
            shape = shape.parent
        return None

    def dump(self) -> str:
        """The transition tree in creation order."""
        children: dict[int, list[Shape]] = {}
        for shape in self.shapes[1:]:
            children.setdefault(shape.parent.shape_id, []).append(shape)

        lines = []

        def walk(shape: Shape, depth: int) -> None:
            if shape.parent is None:
                lines.append("S0 <root>")
            else:
                lines.append(
                    f"{'  ' * depth}S{shape.shape_id} {shape.prop_name}: "
                    f"{shape.prop_tag.name} [slot {shape.slot_idx}]"
                )
            for child in children.get(shape.shape_id, []):
                walk(child, depth + 1)

        walk(self.root, 0)
        return "\n".join(lines)
