"""Causal connection: the implementation model and its concern views.

The monitor keeps the implementation model up to date from sensor events.
Concern views (architecture, performance, failure, environment) are
projections of the implementation model defined by declarative rule
tables (:class:`ViewSpec`) and are synchronized incrementally in both
directions.  Aggregated metrics flow forward only.
"""
from __future__ import annotations

import ast
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

from .expr import BUILTINS, ExpressionError, compile_expr, evaluate
from .model import (AddElement, Element, Metamodel, ModelDelta, RemoveElement, SetAttribute,
                    TypedModel, diff, patch)
from .simulator import SensorEvent, SensorSnapshot, WindowMetrics

IMPLEMENTATION = "Implementation"
VIEW_KINDS = ("architecture", "performance", "failure", "environment")


class SyncError(Exception):
    pass


class UnknownEventSubject(SyncError):
    pass


class CorrespondenceCorrupt(SyncError):
    pass


class ReadOnlyFeature(SyncError):
    pass


class AmbiguousConcretization(SyncError):
    pass


def load_metamodel(name: str) -> Metamodel:
    """One of the bundled metamodels, by file stem (``"implementation"``, ...)."""
    text = (resources.files("megaloop") / "data" / "metamodels" / f"{name}.json").read_text()
    return Metamodel.from_dict(json.loads(text))


def load_view_spec(kind: str) -> "ViewSpec":
    text = (resources.files("megaloop") / "data" / "views" / f"{kind}.json").read_text()
    return ViewSpec.from_dict(json.loads(text))


def standard_metamodels() -> dict[str, Metamodel]:
    out = {}
    for stem in ("implementation", *VIEW_KINDS, "evaluation", "change"):
        mm = load_metamodel(stem)
        out[mm.name] = mm
    return out


# --------------------------------------------------------------------------
# implementation model <- sensors


def type_id(name: str) -> str:
    return "type:" + name


def node_id(name: str) -> str:
    return "node:" + name


def load_id(entry: str) -> str:
    return "load:" + entry


def _metric_attrs(m: WindowMetrics, window: float) -> dict[str, Any]:
    return {"arrivals": m.arrivals, "completed": m.completed, "failed": m.failed,
            "avgResponseTime": m.avg_response_time, "utilization": m.utilization,
            "arrivalRate": m.arrivals / window, "inFlight": m.in_flight_end}


def build_implementation_model(snapshot: SensorSnapshot) -> TypedModel:
    """Implementation model rebuilt from scratch out of one sensor snapshot."""
    ed = TypedModel(IMPLEMENTATION).edit()
    for t in snapshot.types:
        ed.add(type_id(t.name), "ComponentType",
               {"name": t.name, "provides": t.provides, "requires": ",".join(t.requires) or None,
                "serviceTimeMean": t.service_time_mean, "failureRate": t.failure_rate})
    for n in snapshot.nodes:
        ed.add(node_id(n.name), "Node", {"name": n.name, "capacity": n.capacity, "speed": n.speed})
    for entry, rate in snapshot.workloads.items():
        ed.add(load_id(entry), "Workload", {"entryType": entry, "rate": rate})
    for i in snapshot.instances:
        attrs = {"state": i.state, "weight": i.weight,
                 **_metric_attrs(snapshot.metrics.get(i.instance_id, WindowMetrics()), snapshot.window)}
        ed.add(i.instance_id, "Instance", attrs,
               {"type": [type_id(i.type_name)], "host": [node_id(i.node_name)]})
    for i in snapshot.instances:
        targets = sorted(c.target for c in snapshot.connectors if c.source == i.instance_id)
        ed.set_links(i.instance_id, "connectsTo", targets)
    return ed.freeze()


def monitor_update(impl: TypedModel, events: Sequence[SensorEvent], window: float = 10.0) -> ModelDelta:
    """Delta that brings ``impl`` up to date with ``events`` (oldest first).

    The model is updated in place of being rebuilt; request-level events are
    summarised by the ``WindowClosed`` records and otherwise ignored.
    """
    ed = impl.edit()
    last = float("-inf")

    def need(eid: str) -> None:
        if eid not in ed:
            raise UnknownEventSubject(f"event references unknown element {eid!r}")

    for ev in events:
        if ev.time < last:
            raise SyncError("events are not in timestamp order")
        last = ev.time
        k, s, d = ev.kind, ev.subject, ev.data
        if k == "InstanceStarted":
            need(type_id(d["typeName"]))
            need(node_id(d["nodeName"]))
            ed.add(s, "Instance", {"state": "running", "weight": 1.0,
                                   **_metric_attrs(WindowMetrics(), window)},
                   {"type": [type_id(d["typeName"])], "host": [node_id(d["nodeName"])]})
        elif k == "InstanceRemoved":
            need(s)
            ed.remove(s)
        elif k == "InstanceFailed":
            need(s)
            ed.set(s, "state", "failed")
        elif k == "InstanceStateChanged":
            need(s)
            ed.set(s, "state", d["state"])
        elif k == "InstanceMigrated":
            need(s)
            need(node_id(d["nodeName"]))
            ed.set_links(s, "host", [node_id(d["nodeName"])])
        elif k in ("ConnectorAdded", "ConnectorRemoved"):
            need(s)
            need(d["target"])
            targets = list(ed[s].targets("connectsTo"))
            if k == "ConnectorAdded":
                targets.append(d["target"])
            else:
                targets.remove(d["target"])
            ed.set_links(s, "connectsTo", sorted(targets))
        elif k == "ParameterChanged":
            need(s)
            if d["name"] == "weight":
                ed.set(s, "weight", float(d["value"]))
        elif k == "LoadChanged":
            lid = load_id(d["entryType"])
            if lid in ed:
                ed.set(lid, "rate", float(d["rate"]))
            else:
                ed.add(lid, "Workload", {"entryType": d["entryType"], "rate": float(d["rate"])})
        elif k == "WindowClosed":
            for iid, m in sorted(d["metrics"].items()):
                need(iid)
                for name, value in _metric_attrs(WindowMetrics.from_dict(m), window).items():
                    ed.set(iid, name, value)
    return diff(impl, ed.freeze())


# --------------------------------------------------------------------------
# view specifications


@dataclass(frozen=True)
class AttributeRule:
    name: str
    path: str | None = None
    expr: str | None = None
    writable: bool = False


@dataclass(frozen=True)
class LinkRule:
    name: str
    path: str
    writable: bool = False


@dataclass(frozen=True)
class ProjectionRule:
    name: str
    source: str
    target: str
    attributes: tuple[AttributeRule, ...] = ()
    links: tuple[LinkRule, ...] = ()
    writable: bool = False
    defaults: Mapping[str, Any] = field(default_factory=dict)

    def attribute(self, name: str) -> AttributeRule | None:
        for a in self.attributes:
            if a.name == name:
                return a
        return None

    def link(self, name: str) -> LinkRule | None:
        for l in self.links:
            if l.name == name:
                return l
        return None


@dataclass(frozen=True)
class ViewSpec:
    view_kind: str
    metamodel: str
    rules: tuple[ProjectionRule, ...]

    def __post_init__(self):
        sources = [r.source for r in self.rules]
        if len(set(sources)) != len(sources):
            raise SyncError(f"{self.view_kind}: rules must be functional (one rule per source type)")
        for r in self.rules:
            for a in r.attributes:
                if (a.path is None) == (a.expr is None):
                    raise SyncError(f"{r.name}.{a.name}: exactly one of path/expr")
                if a.expr is not None and a.writable:
                    raise SyncError(f"{r.name}.{a.name}: expression derivations are read-only")
                if a.path is not None and a.path.count(".") > 1:
                    raise SyncError(f"{r.name}.{a.name}: paths navigate at most one reference")

    def rule_for_source(self, type_name: str) -> ProjectionRule | None:
        for r in self.rules:
            if r.source == type_name:
                return r
        return None

    def rule_for_target(self, type_name: str) -> ProjectionRule | None:
        for r in self.rules:
            if r.target == type_name:
                return r
        return None

    def writable_features(self, target_type: str) -> tuple[set[str], set[str]]:
        r = self.rule_for_target(target_type)
        if r is None or not r.writable:
            return set(), set()
        return ({a.name for a in r.attributes if a.writable}, {l.name for l in r.links if l.writable})

    @classmethod
    def from_dict(cls, d: Mapping) -> "ViewSpec":
        rules = []
        for r in d["rules"]:
            rules.append(ProjectionRule(
                r["name"], r["source"], r["target"],
                tuple(AttributeRule(a["name"], a.get("path"), a.get("expr"), bool(a.get("writable", False)))
                      for a in r.get("attributes", [])),
                tuple(LinkRule(l["name"], l["path"], bool(l.get("writable", False)))
                      for l in r.get("links", [])),
                bool(r.get("writable", False)), dict(r.get("defaults", {}))))
        return cls(d["viewKind"], d["metamodel"], tuple(rules))

    def to_dict(self) -> dict:
        return {"viewKind": self.view_kind, "metamodel": self.metamodel, "rules": [
            {"name": r.name, "source": r.source, "target": r.target, "writable": r.writable,
             "defaults": dict(r.defaults),
             "attributes": [{"name": a.name, **({"path": a.path} if a.path else {"expr": a.expr}),
                             "writable": a.writable} for a in r.attributes],
             "links": [{"name": l.name, "path": l.path, "writable": l.writable} for l in r.links]}
            for r in self.rules]}


@dataclass(frozen=True)
class Correspondence:
    impl_id: str
    view_id: str
    view_kind: str
    rule: str


class CorrespondenceStore:
    """impl element <-> view element links, one entry per projected element."""

    def __init__(self, links: Iterable[Correspondence] = ()):
        self._by_impl: dict[tuple[str, str], Correspondence] = {}
        self._by_view: dict[tuple[str, str], Correspondence] = {}
        for c in links:
            self.add(c)

    def add(self, c: Correspondence) -> None:
        old = self._by_view.get((c.view_kind, c.view_id))
        if old is not None and old.impl_id != c.impl_id:
            raise CorrespondenceCorrupt(f"{c.view_kind}:{c.view_id} already corresponds to {old.impl_id}")
        self._by_impl[(c.view_kind, c.impl_id)] = c
        self._by_view[(c.view_kind, c.view_id)] = c

    def discard(self, view_kind: str, impl_id: str) -> None:
        c = self._by_impl.pop((view_kind, impl_id), None)
        if c is not None:
            self._by_view.pop((view_kind, c.view_id), None)

    def view_of(self, view_kind: str, impl_id: str) -> str | None:
        c = self._by_impl.get((view_kind, impl_id))
        return c.view_id if c else None

    def impl_of(self, view_kind: str, view_id: str) -> str | None:
        c = self._by_view.get((view_kind, view_id))
        return c.impl_id if c else None

    def links(self, view_kind: str | None = None) -> list[Correspondence]:
        return sorted((c for c in self._by_impl.values() if view_kind in (None, c.view_kind)),
                      key=lambda c: (c.view_kind, c.impl_id))

    def copy(self) -> "CorrespondenceStore":
        return CorrespondenceStore(self.links())

    def check(self, impl: TypedModel, view: TypedModel, view_kind: str) -> None:
        for c in self.links(view_kind):
            if c.impl_id not in impl or c.view_id not in view:
                raise CorrespondenceCorrupt(f"dangling correspondence {c.impl_id} <-> {c.view_id}")

    def to_dict(self) -> list[dict]:
        return [{"implId": c.impl_id, "viewId": c.view_id, "viewKind": c.view_kind, "rule": c.rule}
                for c in self.links()]


# --------------------------------------------------------------------------
# forward: implementation -> view


def _path_value(impl: TypedModel, e: Element, path: str) -> Any:
    if "." not in path:
        return e.attrs.get(path)
    ref, attr = path.split(".")
    targets = e.targets(ref)
    if not targets or targets[0] not in impl:
        return None
    return impl[targets[0]].attrs.get(attr)


def _project_element(impl: TypedModel, e: Element, rule: ProjectionRule, kind: str,
                     store: CorrespondenceStore, spec: ViewSpec) -> Element:
    attrs = {}
    for a in rule.attributes:
        if a.path is not None:
            value = _path_value(impl, e, a.path)
        else:
            # unset optional attributes evaluate to None
            names = {n.id: e.attrs.get(n.id) for n in ast.walk(compile_expr(a.expr))
                     if isinstance(n, ast.Name) and n.id not in BUILTINS}
            try:
                value = evaluate(a.expr, names)
            except ExpressionError as exc:
                raise SyncError(f"{rule.name}.{a.name} on {e.id}: {exc}") from None
        if value is not None:
            attrs[a.name] = value
    links = {}
    for l in rule.links:
        mapped = []
        for t in e.targets(l.path):
            te = impl.get(t)
            if te is None or spec.rule_for_source(te.type) is None:
                continue
            mapped.append(store.view_of(kind, t) or t)
        if mapped:
            links[l.name] = tuple(mapped)
    return Element(e.id, rule.target, attrs, links)


def project(impl: TypedModel, spec: ViewSpec) -> tuple[TypedModel, list[Correspondence]]:
    """Batch projection of the whole implementation model onto one view."""
    store = CorrespondenceStore()
    elements = {}
    corr = []
    for e in impl:
        rule = spec.rule_for_source(e.type)
        if rule is None:
            continue
        corr.append(Correspondence(e.id, e.id, spec.view_kind, rule.name))
        store.add(corr[-1])
    for e in impl:
        rule = spec.rule_for_source(e.type)
        if rule is not None:
            elements[e.id] = _project_element(impl, e, rule, spec.view_kind, store, spec)
    return TypedModel(spec.metamodel, elements), corr


def sync_forward(impl_delta: ModelDelta, impl: TypedModel, view: TypedModel, spec: ViewSpec,
                 store: CorrespondenceStore) -> ModelDelta:
    """View delta for an implementation delta that was already applied to ``impl``.

    Only view elements whose implementation counterpart was touched (or links
    to / navigates to a touched element) are recomputed.
    """
    if not impl_delta:
        return ModelDelta(view.version)
    kind = spec.view_kind
    touched = impl_delta.touched()
    affected = set(touched)
    for e in impl.elements.values():
        if any(t in touched for ts in e.links.values() for t in ts):
            affected.add(e.id)
    elements = dict(view.elements)
    for iid in sorted(affected):
        vid = store.view_of(kind, iid)
        if vid is not None and vid not in elements:
            raise CorrespondenceCorrupt(f"{kind}: {iid} corresponds to missing view element {vid}")
        e = impl.get(iid)
        rule = spec.rule_for_source(e.type) if e is not None else None
        if rule is None:
            if vid is not None:
                del elements[vid]
                store.discard(kind, iid)
            continue
        if vid is None:
            vid = iid
            if vid in elements:
                raise CorrespondenceCorrupt(f"{kind}: view element {vid} exists without correspondence")
            store.add(Correspondence(iid, vid, kind, rule.name))
    for iid in sorted(affected):
        e = impl.get(iid)
        vid = store.view_of(kind, iid)
        if e is not None and vid is not None:
            elements[vid] = _project_element(impl, e, spec.rule_for_source(e.type), kind, store, spec)
    # links may only point at elements still present in the view
    for vid, ve in list(elements.items()):
        if any(t not in elements for ts in ve.links.values() for t in ts):
            raise CorrespondenceCorrupt(f"{kind}: {vid} links to a removed view element")
    return diff(view, TypedModel(view.metamodel, elements, view.version))


# --------------------------------------------------------------------------
# backward: view -> implementation


def _find_by_attr(impl: TypedModel, type_name: str, attr: str, value: Any) -> str:
    hits = [e.id for e in impl if e.type == type_name and e.attrs.get(attr) == value]
    if len(hits) != 1:
        raise AmbiguousConcretization(f"no unique {type_name} with {attr}={value!r} ({len(hits)} found)")
    return hits[0]


def sync_backward(view_delta: ModelDelta, view: TypedModel, impl: TypedModel, spec: ViewSpec,
                  store: CorrespondenceStore, impl_mm: Metamodel) -> ModelDelta:
    """Implementation delta realising ``view_delta`` (given on ``view``).

    Only writable features may change; new elements must name every
    writable attribute explicitly (placement is never guessed).
    """
    if not view_delta:
        return ModelDelta(impl.version)
    kind = spec.view_kind
    for c in view_delta:
        vtype = (c.type if isinstance(c, (AddElement, RemoveElement))
                 else view[c.id].type if c.id in view else None)
        if vtype is None:
            # element added earlier in this delta
            vtype = next((x.type for x in view_delta if isinstance(x, AddElement) and x.id == c.id), None)
        rule = spec.rule_for_target(vtype) if vtype else None
        if rule is None or not rule.writable:
            raise ReadOnlyFeature(f"{kind}: {vtype} elements are read-only")
        if isinstance(c, (AddElement, RemoveElement)):
            for name, value in c.attrs.items():
                a = rule.attribute(name)
                if a is None:
                    raise ReadOnlyFeature(f"{kind}: unknown feature {vtype}.{name}")
                if value is not None and not a.writable and isinstance(c, AddElement):
                    raise ReadOnlyFeature(f"{kind}: {vtype}.{name} is derived")
        elif isinstance(c, SetAttribute):
            a = rule.attribute(c.name)
            if a is None or not a.writable:
                raise ReadOnlyFeature(f"{kind}: {vtype}.{c.name} is read-only")
        else:
            l = rule.link(c.ref)
            if l is None or not l.writable:
                raise ReadOnlyFeature(f"{kind}: {vtype}.{c.ref} is read-only")

    after = patch(view, view_delta)
    ed = impl.edit()

    def impl_id(vid: str) -> str:
        return store.impl_of(kind, vid) or vid

    def apply_attr(iid: str, a: AttributeRule, value: Any, src_type: str) -> None:
        if "." in a.path:
            ref, attr = a.path.split(".")
            target_type = impl_mm.type(src_type).reference(ref).target
            ed.set_links(iid, ref, [_find_by_attr(ed.freeze(), target_type, attr, value)])
        else:
            ed.set(iid, a.path, value)

    touched = []
    for c in view_delta:
        if isinstance(c, RemoveElement):
            iid = impl_id(c.id)
            if iid in ed:
                ed.remove(iid)
        elif isinstance(c, AddElement):
            rule = spec.rule_for_target(c.type)
            iid = impl_id(c.id)
            if iid in ed:
                raise AmbiguousConcretization(f"implementation element {iid!r} already exists")
            missing = [a.name for a in rule.attributes if a.writable and c.attrs.get(a.name) is None]
            if missing:
                raise AmbiguousConcretization(f"{c.id}: {', '.join(missing)} must be given explicitly")
            ed.add(iid, rule.source, dict(rule.defaults))
            for a in rule.attributes:
                if a.writable:
                    apply_attr(iid, a, c.attrs[a.name], rule.source)
            touched.append(c.id)
        elif isinstance(c, SetAttribute):
            rule = spec.rule_for_target(after[c.id].type if c.id in after else view[c.id].type)
            if c.id in after:
                if c.new is None:
                    raise AmbiguousConcretization(f"{c.id}.{c.name} cannot be unset")
                apply_attr(impl_id(c.id), rule.attribute(c.name), c.new, rule.source)
        else:
            touched.append(c.id)
    for vid in sorted(set(touched)):
        if vid not in after:
            continue
        rule = spec.rule_for_target(after[vid].type)
        iid = impl_id(vid)
        for l in rule.links:
            if not l.writable:
                continue
            hidden = [t for t in ed[iid].targets(l.path)
                      if t in ed and spec.rule_for_source(ed[t].type) is None]
            mapped = [impl_id(t) for t in after[vid].targets(l.name)]
            ed.set_links(iid, l.path, hidden + mapped)
    return diff(impl, ed.freeze())


# --------------------------------------------------------------------------
# engine


class SyncEngine:
    """Owns the correspondence store and the view specs of one runtime."""

    def __init__(self, specs: Mapping[str, ViewSpec], impl_mm: Metamodel):
        self.specs = dict(specs)
        self.impl_mm = impl_mm
        self.store = CorrespondenceStore()

    def initial_views(self, impl: TypedModel) -> dict[str, TypedModel]:
        views = {}
        for kind, spec in sorted(self.specs.items()):
            view, corr = project(impl, spec)
            for c in corr:
                self.store.add(c)
            views[kind] = view
        return views

    def forward(self, kind: str, impl_delta: ModelDelta, impl: TypedModel, view: TypedModel) -> ModelDelta:
        return sync_forward(impl_delta, impl, view, self.specs[kind], self.store)

    def backward(self, kind: str, view_delta: ModelDelta, view: TypedModel, impl: TypedModel) -> ModelDelta:
        return sync_backward(view_delta, view, impl, self.specs[kind], self.store, self.impl_mm)


def writable_projection(view: TypedModel, spec: ViewSpec) -> TypedModel:
    """Restrict a view to its writable rules and features (the structural part)."""
    elements = {}
    for e in view:
        attrs, links = spec.writable_features(e.type)
        if not attrs and not links:
            continue
        elements[e.id] = Element(e.id, e.type, {k: v for k, v in e.attrs.items() if k in attrs},
                                 {k: v for k, v in e.links.items() if k in links})
    # links only to kept elements
    for eid, e in list(elements.items()):
        kept = {k: tuple(t for t in v if t in elements) for k, v in e.links.items()}
        elements[eid] = Element(e.id, e.type, e.attrs, kept)
    return TypedModel(view.metamodel, elements, view.version)
