"""The megamodel: a registry of runtime models, relations between them,
executable operation units and the processes that chain them.

Every model write goes through :meth:`Megamodel.write`, which bumps the
node's version and notifies the write observers.  That single choke point
is what the read/write audits and the run trace rely on.
"""
from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol

from .model import Metamodel, ModelDelta, TypedModel, conforms, patch

SCHEMA = "megaloop.megamodel/1"

REFLECTION, ADAPTATION = "reflection", "adaptation"
SUBJECTS = ("system", "environment")
MODES = ("descriptive", "prescriptive")
ADAPTATION_KINDS = ("evaluation", "change")
ADAPTATION_MODES = ("explicit", "implicit")
RELATION_KINDS = ("overlap", "refinement", "deployment", "trace", "synchronization",
                  "changePropagation", "derives")
EXECUTABLE_KINDS = ("synchronization", "changePropagation")
OP_KINDS = ("read", "write", "apply")
NONE = "none"


class MegamodelError(Exception):
    pass


class InvalidCategoryCombination(MegamodelError):
    pass


class NonConformingInitialModel(MegamodelError):
    pass


class DanglingEndpoint(MegamodelError):
    pass


class MissingBehavior(MegamodelError):
    pass


class UnknownNode(MegamodelError):
    pass


class InvalidProcess(MegamodelError):
    pass


class UndeclaredWrite(MegamodelError):
    """A unit tried to write a node it does not list in its outputs."""


class BehaviorFailure(MegamodelError):
    def __init__(self, unit_id: str, cause: BaseException):
        super().__init__(f"{unit_id}: {type(cause).__name__}: {cause}")
        self.unit_id = unit_id
        self.cause = cause


# --------------------------------------------------------------------------
# megamodel language


@dataclass(frozen=True)
class ModelNode:
    node_id: str
    metamodel: str
    top_category: str
    subject: str = NONE
    mode: str = NONE
    analyzable: bool = False
    adaptation_kind: str = NONE
    adaptation_mode: str = NONE
    label: str = ""

    def check(self) -> None:
        if self.top_category == REFLECTION:
            ok = (self.subject in SUBJECTS and self.mode in MODES
                  and self.adaptation_kind == NONE and self.adaptation_mode == NONE)
        elif self.top_category == ADAPTATION:
            ok = (self.adaptation_kind in ADAPTATION_KINDS and self.adaptation_mode in ADAPTATION_MODES
                  and self.subject == NONE and self.mode == NONE)
        else:
            ok = False
        if not ok:
            raise InvalidCategoryCombination(f"{self.node_id}: {self.category_string()}")

    @property
    def is_reflection(self) -> bool:
        return self.top_category == REFLECTION

    @property
    def is_adaptation(self) -> bool:
        return self.top_category == ADAPTATION

    def stereotype(self) -> str:
        if self.is_reflection:
            s = f"{self.mode} {self.subject} model"
            return s + ", analyzable" if self.analyzable else s
        return f"{self.adaptation_mode} {self.adaptation_kind} model"

    def category_string(self) -> str:
        return (f"category={self.top_category} subject={self.subject} mode={self.mode} "
                f"analyzable={self.analyzable} adaptationKind={self.adaptation_kind} "
                f"adaptationMode={self.adaptation_mode}")

    def to_dict(self) -> dict:
        return {"nodeId": self.node_id, "metamodel": self.metamodel, "topCategory": self.top_category,
                "subject": self.subject, "mode": self.mode, "analyzable": self.analyzable,
                "adaptationKind": self.adaptation_kind, "adaptationMode": self.adaptation_mode,
                "label": self.label}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelNode":
        return cls(d["nodeId"], d["metamodel"], d["topCategory"], d.get("subject", NONE),
                   d.get("mode", NONE), bool(d.get("analyzable", False)),
                   d.get("adaptationKind", NONE), d.get("adaptationMode", NONE), d.get("label", ""))


def reflection(node_id: str, metamodel: str, subject: str, mode: str,
               analyzable: bool = False, label: str = "") -> ModelNode:
    return ModelNode(node_id, metamodel, REFLECTION, subject, mode, analyzable, label=label)


def adaptation(node_id: str, metamodel: str, kind: str, mode: str, label: str = "") -> ModelNode:
    return ModelNode(node_id, metamodel, ADAPTATION, adaptation_kind=kind, adaptation_mode=mode,
                     label=label)


@dataclass(frozen=True)
class RelationEdge:
    relation_id: str
    source: str
    target: str
    kind: str
    critical: bool = False
    directed: bool = True
    unit: str | None = None

    def to_dict(self) -> dict:
        return {"relationId": self.relation_id, "source": self.source, "target": self.target,
                "kind": self.kind, "critical": self.critical, "directed": self.directed,
                "unit": self.unit}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RelationEdge":
        return cls(d["relationId"], d["source"], d["target"], d["kind"], bool(d.get("critical", False)),
                   bool(d.get("directed", True)), d.get("unit"))


@dataclass(frozen=True)
class OperationUnit:
    unit_id: str
    op_kind: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    behavior: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"unitId": self.unit_id, "opKind": self.op_kind, "inputNodes": list(self.inputs),
                "outputNodes": list(self.outputs), "behaviorRef": self.behavior,
                "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "OperationUnit":
        return cls(d["unitId"], d["opKind"], tuple(d.get("inputNodes", ())),
                   tuple(d.get("outputNodes", ())), d["behaviorRef"], dict(d.get("params", {})))


@dataclass(frozen=True)
class Trigger:
    kind: str = "timer"
    period: float | None = 10.0
    event: str | None = None

    def to_dict(self) -> dict:
        if self.kind == "timer":
            return {"timer": self.period}
        return {"event": self.event}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trigger":
        if "timer" in d:
            return cls("timer", float(d["timer"]))
        return cls("event", None, d["event"])


@dataclass(frozen=True)
class ProcessGraph:
    process_id: str
    units: tuple[str, ...]
    control_edges: tuple[tuple[str, str], ...] = ()
    trigger: Trigger = Trigger()

    def predecessors(self, unit_id: str) -> list[str]:
        return sorted(a for a, b in self.control_edges if b == unit_id)

    def to_dict(self) -> dict:
        return {"processId": self.process_id, "units": list(self.units),
                "controlEdges": [list(e) for e in self.control_edges],
                "trigger": self.trigger.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProcessGraph":
        return cls(d["processId"], tuple(d["units"]), tuple(tuple(e) for e in d.get("controlEdges", ())),
                   Trigger.from_dict(d.get("trigger", {"timer": 10.0})))


@dataclass(frozen=True)
class WriteRecord:
    node: str
    version: int
    writer: str
    delta: ModelDelta


@dataclass(frozen=True)
class WellFormednessViolation:
    kind: str
    subject: str
    message: str


@dataclass(frozen=True)
class WellFormednessReport:
    violations: tuple[WellFormednessViolation, ...] = ()

    @property
    def well_formed(self) -> bool:
        return not self.violations

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]


# --------------------------------------------------------------------------
# the registry


class Megamodel:
    def __init__(self, check_conformance: bool = False):
        self.metamodels: dict[str, Metamodel] = {}
        self.nodes: dict[str, ModelNode] = {}
        self.models: dict[str, TypedModel] = {}
        self.relations: dict[str, RelationEdge] = {}
        self.units: dict[str, OperationUnit] = {}
        self.processes: dict[str, ProcessGraph] = {}
        self.check_conformance = check_conformance
        self.observers: list[Callable[[WriteRecord], None]] = []

    # -- organisation

    def add_metamodel(self, mm: Metamodel) -> None:
        self.metamodels[mm.name] = mm

    def register_model(self, descriptor: ModelNode, initial: TypedModel) -> str:
        descriptor.check()
        if descriptor.node_id in self.nodes:
            raise MegamodelError(f"node {descriptor.node_id!r} already registered")
        mm = self.metamodels.get(descriptor.metamodel)
        if mm is None:
            raise NonConformingInitialModel(f"unknown metamodel {descriptor.metamodel!r}")
        if initial.metamodel != mm.name:
            raise NonConformingInitialModel(f"{descriptor.node_id}: model is a {initial.metamodel}")
        report = conforms(initial, mm)
        if not report.conforms:
            raise NonConformingInitialModel(f"{descriptor.node_id}: {report.violations[0].message}")
        self.nodes[descriptor.node_id] = descriptor
        self.models[descriptor.node_id] = initial
        return descriptor.node_id

    def update_descriptor(self, descriptor: ModelNode) -> None:
        """Replace registry attributes of an existing node (content untouched)."""
        descriptor.check()
        if descriptor.node_id not in self.nodes:
            raise UnknownNode(descriptor.node_id)
        self.nodes[descriptor.node_id] = descriptor

    def add_relation(self, edge: RelationEdge) -> str:
        if edge.kind not in RELATION_KINDS:
            raise MegamodelError(f"unknown relation kind {edge.kind!r}")
        for end in (edge.source, edge.target):
            if end not in self.nodes:
                raise DanglingEndpoint(f"{edge.relation_id}: no node {end!r}")
        if edge.source == edge.target:
            raise MegamodelError(f"{edge.relation_id}: self-loops are not allowed")
        if edge.relation_id in self.relations:
            raise MegamodelError(f"relation {edge.relation_id!r} already exists")
        if edge.kind in EXECUTABLE_KINDS:
            if edge.unit is None:
                raise MissingBehavior(f"{edge.relation_id}: {edge.kind} needs an executable unit")
            if edge.unit not in self.units:
                raise MissingBehavior(f"{edge.relation_id}: unit {edge.unit!r} not registered")
        self.relations[edge.relation_id] = edge
        return edge.relation_id

    def add_unit(self, unit: OperationUnit) -> str:
        if unit.op_kind not in OP_KINDS:
            raise MegamodelError(f"{unit.unit_id}: unknown op kind {unit.op_kind!r}")
        if unit.unit_id in self.units:
            raise MegamodelError(f"unit {unit.unit_id!r} already exists")
        self.units[unit.unit_id] = unit
        return unit.unit_id

    def add_process(self, process: ProcessGraph) -> str:
        self.processes[process.process_id] = process
        return process.process_id

    def relations_of(self, node_id: str, kind: str | None = None) -> list[RelationEdge]:
        return [r for _, r in sorted(self.relations.items())
                if node_id in (r.source, r.target) and (kind is None or r.kind == kind)]

    def nodes_where(self, **attrs) -> list[str]:
        return [n for n, d in sorted(self.nodes.items())
                if all(getattr(d, k) == v for k, v in attrs.items())]

    # -- utilisation

    def read(self, node_id: str) -> TypedModel:
        try:
            return self.models[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def version(self, node_id: str) -> int:
        return self.read(node_id).version

    def versions(self) -> dict[str, int]:
        return {n: m.version for n, m in sorted(self.models.items())}

    def metamodel_of(self, node_id: str) -> Metamodel:
        return self.metamodels[self.nodes[node_id].metamodel]

    def write(self, node_id: str, delta: ModelDelta, writer: str) -> int:
        current = self.read(node_id)
        updated = patch(current, delta)
        if self.check_conformance:
            report = conforms(updated, self.metamodel_of(node_id))
            if not report.conforms:
                raise MegamodelError(f"write by {writer} breaks conformance of {node_id}: "
                                     f"{report.violations[0].rule} {report.violations[0].message}")
        self.models[node_id] = updated
        rec = WriteRecord(node_id, updated.version, writer, delta)
        for obs in list(self.observers):
            obs(rec)
        return updated.version

    def impact_set(self, start: str, critical_only: bool = False) -> set[str]:
        if start not in self.nodes:
            raise UnknownNode(start)
        adj: dict[str, set[str]] = {}
        for r in self.relations.values():
            if critical_only and not r.critical:
                continue
            adj.setdefault(r.source, set()).add(r.target)
            if not r.directed:
                adj.setdefault(r.target, set()).add(r.source)
        seen = {start}
        todo = deque([start])
        while todo:
            n = todo.popleft()
            for m in adj.get(n, ()):
                if m not in seen:
                    seen.add(m)
                    todo.append(m)
        seen.discard(start)
        return seen

    def validate(self) -> WellFormednessReport:
        out: list[WellFormednessViolation] = []

        def bad(kind, subject, msg):
            out.append(WellFormednessViolation(kind, subject, msg))

        for nid, d in sorted(self.nodes.items()):
            try:
                d.check()
            except InvalidCategoryCombination as exc:
                bad("invalidCategory", nid, str(exc))
        for rid, r in sorted(self.relations.items()):
            for end in (r.source, r.target):
                if end not in self.nodes:
                    bad("danglingEndpoint", rid, f"endpoint {end!r} not registered")
            if r.kind in EXECUTABLE_KINDS and (r.unit is None or r.unit not in self.units):
                bad("missingBehavior", rid, f"{r.kind} relation without a registered unit")
        for uid, u in sorted(self.units.items()):
            for n in (*u.inputs, *u.outputs):
                if n not in self.nodes:
                    bad("unknownNode", uid, f"references unregistered node {n!r}")
            if u.op_kind == "apply":
                ins = [self.nodes[n] for n in u.inputs if n in self.nodes]
                if not any(d.is_adaptation for d in ins) or not any(d.is_reflection for d in ins):
                    bad("invalidUnit", uid, "apply units need an adaptation and a reflection input")
        for pid, p in sorted(self.processes.items()):
            members = set(p.units)
            for u in p.units:
                if u not in self.units:
                    bad("unknownUnit", pid, f"unit {u!r} not registered")
            for a, b in p.control_edges:
                if a not in members or b not in members:
                    bad("unknownUnit", pid, f"control edge {a}->{b} leaves the process")
            edges = [(a, b) for a, b in p.control_edges if a in members and b in members]
            if _has_cycle(members, edges):
                bad("nonDagProcess", pid, "control edges contain a cycle")
            entries = members - {b for _, b in edges}
            reach = set(entries)
            todo = deque(sorted(entries))
            while todo:
                n = todo.popleft()
                for a, b in edges:
                    if a == n and b not in reach:
                        reach.add(b)
                        todo.append(b)
            for u in sorted(members - reach):
                bad("unreachableUnit", pid, f"unit {u!r} not reachable from an entry unit")
        return WellFormednessReport(tuple(out))

    # -- interchange

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "metamodels": [self.metamodels[k].to_dict() for k in sorted(self.metamodels)],
            "nodes": [{**self.nodes[k].to_dict(), "model": self.models[k].to_dict()}
                      for k in sorted(self.nodes)],
            "relations": [self.relations[k].to_dict() for k in sorted(self.relations)],
            "units": [self.units[k].to_dict() for k in sorted(self.units)],
            "processes": [self.processes[k].to_dict() for k in sorted(self.processes)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Megamodel":
        if d.get("schema") != SCHEMA:
            raise MegamodelError(f"unsupported schema {d.get('schema')!r}")
        mm = cls()
        for m in d.get("metamodels", []):
            mm.add_metamodel(Metamodel.from_dict(m))
        for n in d.get("nodes", []):
            mm.register_model(ModelNode.from_dict(n), TypedModel.from_dict(n["model"]))
        for u in d.get("units", []):
            mm.add_unit(OperationUnit.from_dict(u))
        for r in d.get("relations", []):
            mm.add_relation(RelationEdge.from_dict(r))
        for p in d.get("processes", []):
            mm.add_process(ProcessGraph.from_dict(p))
        return mm

    def export_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def import_json(cls, text: str) -> "Megamodel":
        return cls.from_dict(json.loads(text))

    def export_dot(self) -> str:
        lines = ["digraph megamodel {", "  rankdir=LR;", "  node [fontname=Helvetica];"]
        for nid in sorted(self.nodes):
            d = self.nodes[nid]
            shape = "box" if d.is_reflection else "note"
            name = d.label or nid
            label = f"«{d.stereotype()}»\\n{name}\\nv{self.models[nid].version}"
            lines.append(f"  {_q(nid)} [shape={shape}, label={_q(label)}];")
        for uid in sorted(self.units):
            u = self.units[uid]
            lines.append(f"  {_q('unit:' + uid)} [shape=ellipse, style=dashed, "
                         f"label={_q(u.op_kind + ': ' + uid)}];")
            for n in u.inputs:
                if n in self.nodes:
                    lines.append(f"  {_q(n)} -> {_q('unit:' + uid)} [style=dotted, arrowhead=none];")
            for n in u.outputs:
                if n in self.nodes:
                    lines.append(f"  {_q('unit:' + uid)} -> {_q(n)} [style=dotted];")
        for rid in sorted(self.relations):
            r = self.relations[rid]
            attrs = [f"label={_q(r.kind)}", f"style={'bold' if r.critical else 'dashed'}"]
            if not r.directed:
                attrs.append("dir=both")
            lines.append(f"  {_q(r.source)} -> {_q(r.target)} [{', '.join(attrs)}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


def equivalent(a: Megamodel, b: Megamodel) -> bool:
    """Isomorphism check used for interchange round trips (ids are the identity)."""
    return (
        a.metamodels == b.metamodels
        and a.nodes == b.nodes
        and all(a.models[k].same_content(b.models[k]) and a.models[k].version == b.models[k].version
                for k in a.models)
        and set(a.models) == set(b.models)
        and a.relations == b.relations
        and {k: u.to_dict() for k, u in a.units.items()} == {k: u.to_dict() for k, u in b.units.items()}
        and a.processes == b.processes
    )


def _q(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\\\\n", "\\n") + '"'


def _has_cycle(members: Iterable[str], edges: list[tuple[str, str]]) -> bool:
    indeg = {m: 0 for m in members}
    for _, b in edges:
        indeg[b] += 1
    todo = [m for m, d in indeg.items() if d == 0]
    seen = 0
    while todo:
        n = todo.pop()
        seen += 1
        for a, b in edges:
            if a == n:
                indeg[b] -= 1
                if indeg[b] == 0:
                    todo.append(b)
    return seen != len(indeg)


# --------------------------------------------------------------------------
# enactment


class Behavior(Protocol):
    def guard(self, ctx: "UnitContext") -> bool: ...

    def run(self, ctx: "UnitContext") -> Mapping[str, Any] | None: ...


@dataclass
class ExecutionRecord:
    time: float
    unit_id: str
    inputs: tuple[tuple[str, int], ...]
    outputs: tuple[tuple[str, int, Mapping[str, int]], ...]
    outcome: str
    reason: str = ""
    details: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "t": self.time, "unit": self.unit_id,
            "inputs": [[n, v] for n, v in self.inputs],
            "outputs": [[n, v, dict(s)] for n, v, s in self.outputs],
            "outcome": self.outcome, "reason": self.reason, "details": dict(self.details),
        }


@dataclass
class ExecutionTrace:
    process_id: str
    trigger: str
    records: list[ExecutionRecord] = field(default_factory=list)
    failures: list[BehaviorFailure] = field(default_factory=list)

    def outcome(self, unit_id: str) -> str | None:
        for r in self.records:
            if r.unit_id == unit_id:
                return r.outcome
        return None

    def order(self) -> list[str]:
        return [r.unit_id for r in self.records]

    def raise_for_failure(self) -> None:
        if self.failures:
            raise self.failures[0]

    def to_dict(self) -> dict:
        return {"process": self.process_id, "trigger": self.trigger,
                "records": [r.to_dict() for r in self.records]}


class UnitContext:
    """What a behavior sees while its unit executes.

    ``knowledge`` persists across enactments; ``scratch`` lives for one
    enactment and is how units of one process hand results to each other.
    """

    def __init__(self, megamodel: Megamodel, unit: OperationUnit, time: float,
                 services: Any, knowledge: dict, scratch: dict):
        self.megamodel = megamodel
        self.unit = unit
        self.time = time
        self.services = services
        self.knowledge = knowledge
        self.scratch = scratch
        self.written: list[tuple[str, int, Mapping[str, int]]] = []

    @property
    def params(self) -> Mapping[str, Any]:
        return self.unit.params

    def read(self, node_id: str) -> TypedModel:
        if node_id not in self.unit.inputs and node_id not in self.unit.outputs:
            raise MegamodelError(f"{self.unit.unit_id} reads undeclared node {node_id!r}")
        return self.megamodel.read(node_id)

    def write(self, node_id: str, delta: ModelDelta) -> int:
        if node_id not in self.unit.outputs:
            raise UndeclaredWrite(f"{self.unit.unit_id} may not write {node_id!r}")
        if not delta:
            return self.megamodel.version(node_id)
        version = self.megamodel.write(node_id, delta, self.unit.unit_id)
        self.written.append((node_id, version, delta.summary()))
        return version


def topological_order(process: ProcessGraph) -> list[str]:
    """Kahn's algorithm; among ready units the smallest id goes first."""
    indeg = {u: 0 for u in process.units}
    for _, b in process.control_edges:
        indeg[b] += 1
    ready = [u for u, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for a, b in sorted(process.control_edges):
            if a == u:
                indeg[b] -= 1
                if indeg[b] == 0:
                    heapq.heappush(ready, b)
    if len(order) != len(indeg):
        raise InvalidProcess(f"{process.process_id}: control edges contain a cycle")
    return order


def enact(megamodel: Megamodel, process_id: str, behaviors: Mapping[str, Behavior], *,
          trigger: str = "timer", clock: Callable[[], float] = lambda: 0.0,
          services: Any = None, knowledge: dict | None = None) -> ExecutionTrace:
    """Run one process instance.

    A unit runs when it has no predecessors, or at least one predecessor
    completed ``ok`` and none failed; otherwise it is recorded ``skipped``.
    A unit whose behavior guard is false is recorded ``skipped`` as well.
    """
    process = megamodel.processes[process_id]
    report = megamodel.validate()
    problems = [v for v in report.violations
                if v.subject == process_id or v.subject in process.units]
    if problems:
        raise InvalidProcess(f"{process_id}: {problems[0].kind}: {problems[0].message}")
    for uid in process.units:
        if megamodel.units[uid].behavior not in behaviors:
            raise InvalidProcess(f"{uid}: behavior {megamodel.units[uid].behavior!r} not resolvable")

    knowledge = {} if knowledge is None else knowledge
    scratch: dict = {}
    trace = ExecutionTrace(process_id, trigger)
    outcomes: dict[str, str] = {}
    for uid in topological_order(process):
        unit = megamodel.units[uid]
        now = clock()
        inputs = tuple((n, megamodel.version(n)) for n in unit.inputs)
        preds = process.predecessors(uid)
        pred_out = [outcomes[p] for p in preds]
        if "failed" in pred_out or any(o == "blocked" for o in pred_out):
            outcomes[uid] = "blocked"
            trace.records.append(ExecutionRecord(now, uid, inputs, (), "skipped", "upstream failure"))
            continue
        if preds and "ok" not in pred_out:
            outcomes[uid] = "skipped"
            trace.records.append(ExecutionRecord(now, uid, inputs, (), "skipped", "upstream skipped"))
            continue
        behavior = behaviors[unit.behavior]
        ctx = UnitContext(megamodel, unit, now, services, knowledge, scratch)
        try:
            if not behavior.guard(ctx):
                outcomes[uid] = "skipped"
                trace.records.append(ExecutionRecord(now, uid, inputs, (), "skipped", "guard false"))
                continue
            details = behavior.run(ctx) or {}
        except Exception as exc:  # recorded, surfaced through trace.failures
            failure = BehaviorFailure(uid, exc)
            trace.failures.append(failure)
            outcomes[uid] = "failed"
            trace.records.append(ExecutionRecord(now, uid, inputs, tuple(ctx.written), "failed",
                                                 f"{type(exc).__name__}: {exc}"))
            continue
        outcomes[uid] = "ok"
        trace.records.append(ExecutionRecord(now, uid, inputs, tuple(ctx.written), "ok", "",
                                             dict(details)))
    return trace
