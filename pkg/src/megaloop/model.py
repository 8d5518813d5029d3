"""Typed models, metamodels, conformance and invertible deltas.

Models are values: every edit produces a new :class:`TypedModel` and the
input is never touched.  Elements are matched by id only.
"""
from __future__ import annotations

import difflib
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

UNBOUNDED = None
ATTR_KINDS = ("string", "integer", "real", "boolean", "enum")


class ModelError(Exception):
    """Base class for model-core errors."""


class MetamodelMismatch(ModelError):
    pass


class MetamodelError(ModelError):
    """Raised for an ill-formed metamodel definition."""


class StaleDelta(ModelError):
    def __init__(self, index: int, message: str):
        super().__init__(f"change #{index}: {message}")
        self.index = index


class InapplicableChange(ModelError):
    def __init__(self, index: int, message: str):
        super().__init__(f"change #{index}: {message}")
        self.index = index


# --------------------------------------------------------------------------
# metamodels


@dataclass(frozen=True)
class AttributeDef:
    name: str
    kind: str
    optional: bool = False
    literals: tuple[str, ...] = ()

    def accepts(self, value: Any) -> bool:
        if self.kind == "string":
            return isinstance(value, str)
        if self.kind == "integer":
            return isinstance(value, int) and not isinstance(value, bool)
        if self.kind == "real":
            return isinstance(value, (int, float)) and not isinstance(value, bool)
        if self.kind == "boolean":
            return isinstance(value, bool)
        return value in self.literals


@dataclass(frozen=True)
class ReferenceDef:
    name: str
    target: str
    lower: int = 0
    upper: int | None = UNBOUNDED
    containment: bool = False


@dataclass(frozen=True)
class ElementType:
    name: str
    attributes: tuple[AttributeDef, ...] = ()
    references: tuple[ReferenceDef, ...] = ()

    def attribute(self, name: str) -> AttributeDef | None:
        for a in self.attributes:
            if a.name == name:
                return a
        return None

    def reference(self, name: str) -> ReferenceDef | None:
        for r in self.references:
            if r.name == name:
                return r
        return None


@dataclass(frozen=True)
class Metamodel:
    name: str
    element_types: tuple[ElementType, ...] = ()

    def __post_init__(self):
        seen = set()
        for et in self.element_types:
            if et.name in seen:
                raise MetamodelError(f"{self.name}: duplicate element type {et.name!r}")
            seen.add(et.name)
        for et in self.element_types:
            for a in et.attributes:
                if a.kind not in ATTR_KINDS:
                    raise MetamodelError(f"{et.name}.{a.name}: unknown kind {a.kind!r}")
                if a.kind == "enum" and not a.literals:
                    raise MetamodelError(f"{et.name}.{a.name}: enum without literals")
            for r in et.references:
                if r.target not in seen:
                    raise MetamodelError(f"{et.name}.{r.name}: unknown target type {r.target!r}")
                if r.lower < 0 or (r.upper is not None and (r.upper < 1 or r.lower > r.upper)):
                    raise MetamodelError(f"{et.name}.{r.name}: bad multiplicity")

    def type(self, name: str) -> ElementType | None:
        for et in self.element_types:
            if et.name == name:
                return et
        return None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "elementTypes": [
                {
                    "name": et.name,
                    "attributes": [
                        {"name": a.name, "kind": a.kind, "optional": a.optional,
                         **({"literals": list(a.literals)} if a.kind == "enum" else {})}
                        for a in et.attributes
                    ],
                    "references": [
                        {"name": r.name, "target": r.target, "lower": r.lower,
                         "upper": r.upper, "containment": r.containment}
                        for r in et.references
                    ],
                }
                for et in self.element_types
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Metamodel":
        types = []
        for et in d.get("elementTypes", []):
            attrs = tuple(
                AttributeDef(a["name"], a["kind"], bool(a.get("optional", False)),
                             tuple(a.get("literals", ())))
                for a in et.get("attributes", [])
            )
            refs = tuple(
                ReferenceDef(r["name"], r["target"], int(r.get("lower", 0)), r.get("upper"),
                             bool(r.get("containment", False)))
                for r in et.get("references", [])
            )
            types.append(ElementType(et["name"], attrs, refs))
        return cls(d["name"], tuple(types))


# --------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class Element:
    id: str
    type: str
    attrs: Mapping[str, Any] = field(default_factory=dict)
    links: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Any:
        return self.attrs[name]

    def get(self, name: str, default: Any = None) -> Any:
        return self.attrs.get(name, default)

    def targets(self, ref: str) -> tuple[str, ...]:
        return self.links.get(ref, ())

    def content(self) -> tuple:
        """Hashable content used for deep equality (empty link lists ignored)."""
        return (
            self.id,
            self.type,
            tuple(sorted((k, type(v).__name__, v) for k, v in self.attrs.items() if v is not None)),
            tuple(sorted((k, tuple(v)) for k, v in self.links.items() if v)),
        )


@dataclass(frozen=True)
class TypedModel:
    metamodel: str
    elements: Mapping[str, Element] = field(default_factory=dict)
    version: int = 0

    def __iter__(self) -> Iterator[Element]:
        return iter(self.elements[k] for k in sorted(self.elements))

    def __len__(self) -> int:
        return len(self.elements)

    def __contains__(self, element_id: str) -> bool:
        return element_id in self.elements

    def __getitem__(self, element_id: str) -> Element:
        return self.elements[element_id]

    def get(self, element_id: str) -> Element | None:
        return self.elements.get(element_id)

    def of_type(self, type_name: str) -> list[Element]:
        return [e for e in self if e.type == type_name]

    def incoming(self, element_id: str) -> list[tuple[str, str, int]]:
        """(source id, reference, index) of every link pointing at ``element_id``."""
        out = []
        for e in self:
            for ref in sorted(e.links):
                for i, t in enumerate(e.links[ref]):
                    if t == element_id:
                        out.append((e.id, ref, i))
        return out

    def content(self) -> frozenset:
        return frozenset(e.content() for e in self.elements.values())

    def same_content(self, other: "TypedModel") -> bool:
        return self.metamodel == other.metamodel and self.content() == other.content()

    def edit(self) -> "ModelEditor":
        return ModelEditor(self)

    def to_dict(self) -> dict:
        return {
            "metamodel": self.metamodel,
            "version": self.version,
            "elements": [
                {
                    "id": e.id,
                    "type": e.type,
                    "attributes": {k: v for k, v in sorted(e.attrs.items()) if v is not None},
                    "links": {k: list(v) for k, v in sorted(e.links.items()) if v},
                }
                for e in self
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TypedModel":
        elements = {}
        for e in d.get("elements", []):
            elements[e["id"]] = Element(
                e["id"], e["type"], dict(e.get("attributes", {})),
                {k: tuple(v) for k, v in e.get("links", {}).items()},
            )
        return cls(d["metamodel"], elements, int(d.get("version", 0)))


class ModelEditor:
    """Mutable draft of a model; ``freeze`` returns a new model value.

    The editor never mutates the model it was created from.
    """

    def __init__(self, model: TypedModel):
        self.base = model
        self._elements = dict(model.elements)

    def __contains__(self, element_id: str) -> bool:
        return element_id in self._elements

    def __getitem__(self, element_id: str) -> Element:
        return self._elements[element_id]

    def get(self, element_id: str) -> Element | None:
        return self._elements.get(element_id)

    def ids(self) -> list[str]:
        return sorted(self._elements)

    def add(self, element_id: str, type_name: str, attrs: Mapping[str, Any] | None = None,
            links: Mapping[str, Sequence[str]] | None = None) -> None:
        if element_id in self._elements:
            raise KeyError(f"duplicate element {element_id!r}")
        self._elements[element_id] = Element(
            element_id, type_name,
            {k: v for k, v in (attrs or {}).items() if v is not None},
            {k: tuple(v) for k, v in (links or {}).items() if v},
        )

    def remove(self, element_id: str) -> None:
        """Remove an element together with every link pointing at it."""
        del self._elements[element_id]
        for eid, e in list(self._elements.items()):
            if any(element_id in ts for ts in e.links.values()):
                links = {k: tuple(t for t in ts if t != element_id) for k, ts in e.links.items()}
                self._elements[eid] = replace(e, links={k: v for k, v in links.items() if v})

    def set(self, element_id: str, name: str, value: Any) -> None:
        e = self._elements[element_id]
        attrs = dict(e.attrs)
        if value is None:
            attrs.pop(name, None)
        else:
            attrs[name] = value
        self._elements[element_id] = replace(e, attrs=attrs)

    def set_links(self, element_id: str, ref: str, targets: Iterable[str]) -> None:
        e = self._elements[element_id]
        links = dict(e.links)
        targets = tuple(targets)
        if targets:
            links[ref] = targets
        else:
            links.pop(ref, None)
        self._elements[element_id] = replace(e, links=links)

    def link(self, element_id: str, ref: str, target: str, index: int | None = None) -> None:
        ts = list(self._elements[element_id].targets(ref))
        ts.insert(len(ts) if index is None else index, target)
        self.set_links(element_id, ref, ts)

    def unlink(self, element_id: str, ref: str, target: str) -> None:
        ts = list(self._elements[element_id].targets(ref))
        ts.remove(target)
        self.set_links(element_id, ref, ts)

    def freeze(self, bump: bool = False) -> TypedModel:
        return TypedModel(self.base.metamodel, dict(self._elements),
                          self.base.version + (1 if bump else 0))


# --------------------------------------------------------------------------
# deltas


@dataclass(frozen=True)
class AddElement:
    id: str
    type: str
    attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class RemoveElement:
    id: str
    type: str
    attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class SetAttribute:
    id: str
    name: str
    old: Any
    new: Any


@dataclass(frozen=True)
class AddLink:
    id: str
    ref: str
    target: str
    index: int


@dataclass(frozen=True)
class RemoveLink:
    id: str
    ref: str
    target: str
    index: int


Change = Union[AddElement, RemoveElement, SetAttribute, AddLink, RemoveLink]
_CHANGE_KINDS = {c.__name__: c for c in (AddElement, RemoveElement, SetAttribute, AddLink, RemoveLink)}


@dataclass(frozen=True)
class ModelDelta:
    base_version: int = 0
    changes: tuple[Change, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.changes)

    def __len__(self) -> int:
        return len(self.changes)

    def __iter__(self) -> Iterator[Change]:
        return iter(self.changes)

    def summary(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.changes:
            out[type(c).__name__] = out.get(type(c).__name__, 0) + 1
        return dict(sorted(out.items()))

    def touched(self) -> set[str]:
        return {c.id for c in self.changes}

    def to_dict(self) -> dict:
        return {"baseVersion": self.base_version,
                "changes": [change_to_dict(c) for c in self.changes]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelDelta":
        return cls(int(d.get("baseVersion", 0)),
                   tuple(change_from_dict(c) for c in d.get("changes", [])))


def change_to_dict(c: Change) -> dict:
    d: dict[str, Any] = {"kind": type(c).__name__}
    for k, v in c.__dict__.items():
        d[k] = dict(v) if isinstance(v, Mapping) else v
    return d


def change_from_dict(d: Mapping) -> Change:
    d = dict(d)
    cls = _CHANGE_KINDS[d.pop("kind")]
    return cls(**d)


def _check_metamodels(a: TypedModel, b: TypedModel) -> None:
    if a.metamodel != b.metamodel:
        raise MetamodelMismatch(f"{a.metamodel!r} != {b.metamodel!r}")


def diff(base: TypedModel, target: TypedModel) -> ModelDelta:
    """Delta turning ``base`` into ``target``; elements are matched by id.

    Change order: link removals (descending index), attribute updates,
    element removals, element additions, link insertions (ascending index).
    """
    _check_metamodels(base, target)
    removals: list[Change] = []
    inserts: list[Change] = []
    sets: list[Change] = []
    removed: list[Change] = []
    added: list[Change] = []

    retyped = {eid for eid, b in base.elements.items()
               if eid in target.elements and target.elements[eid].type != b.type}
    for eid in sorted(set(base.elements) | set(target.elements)):
        b = base.elements.get(eid)
        t = target.elements.get(eid)
        if b is not None and t is not None and b.type != t.type:
            # same id, different type: replace the element
            t_new = t
            t = None
        else:
            t_new = None
        if b is not None:
            refs = sorted(set(b.links) | set(t.links if t else ()))
            for ref in refs:
                old = list(b.targets(ref))
                new = list(t.targets(ref)) if t is not None else []
                if old == new and not retyped.intersection(old):
                    continue
                # links to a retyped element never match: it is removed and re-added
                sm = difflib.SequenceMatcher(None, [(x, x in retyped) for x in old],
                                             [(x, False) for x in new], autojunk=False)
                kept_old: set[int] = set()
                kept_new: set[int] = set()
                for i, j, n in sm.get_matching_blocks():
                    kept_old.update(range(i, i + n))
                    kept_new.update(range(j, j + n))
                for i in sorted(set(range(len(old))) - kept_old, reverse=True):
                    removals.append(RemoveLink(eid, ref, old[i], i))
                for j in sorted(set(range(len(new))) - kept_new):
                    inserts.append(AddLink(eid, ref, new[j], j))
            if t is None:
                removed.append(RemoveElement(eid, b.type, dict(b.attrs)))
            else:
                for name in sorted(set(b.attrs) | set(t.attrs)):
                    ov, nv = b.attrs.get(name), t.attrs.get(name)
                    if ov != nv or type(ov) is not type(nv):
                        sets.append(SetAttribute(eid, name, ov, nv))
        if t_new is not None:
            t = t_new
        if t is not None and (b is None or t_new is not None):
            added.append(AddElement(eid, t.type, dict(t.attrs)))
            for ref in sorted(t.links):
                for j, tgt in enumerate(t.links[ref]):
                    inserts.append(AddLink(eid, ref, tgt, j))
    # link insertions of one list must run in ascending index order
    inserts.sort(key=lambda c: (c.id, c.ref, c.index))
    return ModelDelta(base.version, tuple(removals + sets + removed + added + inserts))


def patch(model: TypedModel, delta: ModelDelta) -> TypedModel:
    """Apply ``delta`` and return a new model with version + 1."""
    elements = dict(model.elements)
    for idx, c in enumerate(delta.changes):
        if isinstance(c, AddElement):
            if c.id in elements:
                raise InapplicableChange(idx, f"element {c.id!r} already exists")
            elements[c.id] = Element(c.id, c.type, {k: v for k, v in c.attrs.items() if v is not None}, {})
        elif isinstance(c, RemoveElement):
            e = elements.get(c.id)
            if e is None:
                raise InapplicableChange(idx, f"no element {c.id!r}")
            if e.type != c.type or dict(e.attrs) != {k: v for k, v in c.attrs.items() if v is not None}:
                raise StaleDelta(idx, f"prior state of {c.id!r} does not match")
            if any(e.links.values()):
                raise InapplicableChange(idx, f"{c.id!r} still has outgoing links")
            for other in elements.values():
                if other.id != c.id and any(c.id in ts for ts in other.links.values()):
                    raise InapplicableChange(idx, f"{c.id!r} is still referenced by {other.id!r}")
            del elements[c.id]
        elif isinstance(c, SetAttribute):
            e = elements.get(c.id)
            if e is None:
                raise InapplicableChange(idx, f"no element {c.id!r}")
            cur = e.attrs.get(c.name)
            if cur != c.old or type(cur) is not type(c.old):
                raise StaleDelta(idx, f"{c.id}.{c.name} is {cur!r}, expected {c.old!r}")
            attrs = dict(e.attrs)
            if c.new is None:
                attrs.pop(c.name, None)
            else:
                attrs[c.name] = c.new
            elements[c.id] = replace(e, attrs=attrs)
        elif isinstance(c, AddLink):
            e = elements.get(c.id)
            if e is None:
                raise InapplicableChange(idx, f"no element {c.id!r}")
            if c.target not in elements:
                raise InapplicableChange(idx, f"link target {c.target!r} missing")
            ts = list(e.targets(c.ref))
            if not 0 <= c.index <= len(ts):
                raise InapplicableChange(idx, f"index {c.index} out of range for {c.id}.{c.ref}")
            ts.insert(c.index, c.target)
            elements[c.id] = replace(e, links={**e.links, c.ref: tuple(ts)})
        elif isinstance(c, RemoveLink):
            e = elements.get(c.id)
            if e is None:
                raise InapplicableChange(idx, f"no element {c.id!r}")
            ts = list(e.targets(c.ref))
            if not 0 <= c.index < len(ts):
                raise InapplicableChange(idx, f"index {c.index} out of range for {c.id}.{c.ref}")
            if ts[c.index] != c.target:
                raise StaleDelta(idx, f"{c.id}.{c.ref}[{c.index}] is {ts[c.index]!r}, expected {c.target!r}")
            del ts[c.index]
            links = dict(e.links)
            if ts:
                links[c.ref] = tuple(ts)
            else:
                links.pop(c.ref, None)
            elements[c.id] = replace(e, links=links)
        else:  # pragma: no cover
            raise InapplicableChange(idx, f"unknown change {c!r}")
    return TypedModel(model.metamodel, elements, model.version + 1)


def invert_change(c: Change) -> Change:
    if isinstance(c, AddElement):
        return RemoveElement(c.id, c.type, c.attrs)
    if isinstance(c, RemoveElement):
        return AddElement(c.id, c.type, c.attrs)
    if isinstance(c, SetAttribute):
        return SetAttribute(c.id, c.name, c.new, c.old)
    if isinstance(c, AddLink):
        return RemoveLink(c.id, c.ref, c.target, c.index)
    return AddLink(c.id, c.ref, c.target, c.index)


def invert(delta: ModelDelta) -> ModelDelta:
    return ModelDelta(delta.base_version + 1, tuple(invert_change(c) for c in reversed(delta.changes)))


def compose(*deltas: ModelDelta) -> ModelDelta:
    """Concatenate deltas that are applied one after the other."""
    if not deltas:
        return ModelDelta()
    return ModelDelta(deltas[0].base_version, tuple(c for d in deltas for c in d.changes))


# --------------------------------------------------------------------------
# conformance


@dataclass(frozen=True)
class Violation:
    subject: str
    rule: str
    message: str


@dataclass(frozen=True)
class ConformanceReport:
    violations: tuple[Violation, ...] = ()

    @property
    def conforms(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.conforms

    def rules(self) -> list[str]:
        return [v.rule for v in self.violations]


def conforms(model: TypedModel, mm: Metamodel) -> ConformanceReport:
    if model.metamodel != mm.name:
        raise MetamodelMismatch(f"model conforms to {model.metamodel!r}, not {mm.name!r}")
    out: list[Violation] = []
    parent: dict[str, list[str]] = {}
    for e in model:
        et = mm.type(e.type)
        if et is None:
            out.append(Violation(e.id, "unknownType", f"type {e.type!r} not in {mm.name}"))
            continue
        for name, value in sorted(e.attrs.items()):
            ad = et.attribute(name)
            if ad is None:
                out.append(Violation(e.id, "unknownAttribute", f"{e.type} has no attribute {name!r}"))
            elif value is not None and not ad.accepts(value):
                out.append(Violation(e.id, "invalidValue", f"{name}={value!r} is not a valid {ad.kind}"))
        for ad in et.attributes:
            if not ad.optional and e.attrs.get(ad.name) is None:
                out.append(Violation(e.id, "missingMandatoryAttribute", f"{ad.name} unset"))
        for ref in sorted(e.links):
            if et.reference(ref) is None and e.links[ref]:
                out.append(Violation(e.id, "unknownAttribute", f"{e.type} has no reference {ref!r}"))
        for rd in et.references:
            ts = e.targets(rd.name)
            if len(ts) < rd.lower or (rd.upper is not None and len(ts) > rd.upper):
                bound = "*" if rd.upper is None else rd.upper
                out.append(Violation(e.id, "multiplicityViolation",
                                     f"{rd.name} has {len(ts)} targets, allowed {rd.lower}..{bound}"))
            for t in ts:
                target = model.elements.get(t)
                if target is None:
                    out.append(Violation(e.id, "danglingLink", f"{rd.name} -> missing {t!r}"))
                elif target.type != rd.target and mm.type(target.type) is not None:
                    out.append(Violation(e.id, "invalidValue", f"{rd.name} -> {t!r} is a {target.type}, "
                                                               f"expected {rd.target}"))
                elif rd.containment:
                    parent.setdefault(t, []).append(e.id)
        for ref in sorted(e.links):
            if et.reference(ref) is None:
                for t in e.links[ref]:
                    if t not in model.elements:
                        out.append(Violation(e.id, "danglingLink", f"{ref} -> missing {t!r}"))
    for child, parents in sorted(parent.items()):
        if len(set(parents)) > 1:
            out.append(Violation(child, "containmentCycle", f"contained by {sorted(set(parents))}"))
    reported: set[str] = set()
    for start in sorted(parent):
        seen = [start]
        cur = start
        while cur in parent:
            cur = parent[cur][0]
            if cur == start:
                cycle = frozenset(seen)
                if not cycle & reported:
                    out.append(Violation(start, "containmentCycle", f"cycle through {sorted(cycle)}"))
                    reported |= cycle
                break
            if cur in seen:
                break
            seen.append(cur)
    return ConformanceReport(tuple(out))
