"""Cross-concern coordination and execution.

Change propagation between views, adaptation analysis by the coordinating
manager, derivation and application of reconfiguration actions, rollback
of tentative model changes and hierarchical escalation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Mapping, Sequence

from .adaptation import (CRITICAL, ChangeModel, EvaluationModel, ViolationRecord,
                         evaluate_constraints)
from .model import Metamodel, ModelDelta, TypedModel, diff, invert, patch
from .simulator import (AddInstance, EffectorError, MigrateInstance, NotQuiescent, Rebind,
                        ReconfigurationAction, RemoveInstance, Restart, SetParameter, Simulator)
from .sync import CorrespondenceStore, ViewSpec, sync_backward, writable_projection

if TYPE_CHECKING:
    from .megamodel import Megamodel


class CoordinationError(Exception):
    pass


class UnmappableChange(CoordinationError):
    pass


class NoHigherLevel(CoordinationError):
    """Escalation was needed but no manager above the failing level can help."""


# --------------------------------------------------------------------------
# change propagation


def _changed_features(before, after) -> tuple[set[str], set[str]]:
    attrs = {k for k in set(before.attrs) | set(after.attrs) if before.attrs.get(k) != after.attrs.get(k)}
    links = {k for k in set(before.links) | set(after.links)
             if tuple(before.links.get(k, ())) != tuple(after.links.get(k, ()))}
    return attrs, links


def propagate_changes(delta: ModelDelta, source_view: TypedModel, target_view: TypedModel,
                      source_spec: ViewSpec, target_spec: ViewSpec,
                      store: CorrespondenceStore | None = None) -> ModelDelta:
    """Map a delta on one view onto another view sharing implementation concepts.

    Features correspond when both views derive them from the same
    implementation path. Edits of read-only (metric) features are dropped;
    a structural edit without a counterpart raises :class:`UnmappableChange`.
    """
    if not delta:
        return ModelDelta(target_view.version)
    skind, tkind = source_spec.view_kind, target_spec.view_kind
    after = patch(source_view, delta)
    ed = target_view.edit()

    def to_target(sid: str) -> str:
        iid = store.impl_of(skind, sid) if store else None
        iid = iid or sid
        return (store.view_of(tkind, iid) if store else None) or iid

    pending_links: list[tuple[str, Any, Any]] = []
    for sid in sorted(delta.touched()):
        before, now = source_view.get(sid), after.get(sid)
        srule = source_spec.rule_for_target((now or before).type)
        if srule is None:
            raise UnmappableChange(f"{skind}: no projection rule for {(now or before).type}")
        trule = target_spec.rule_for_source(srule.source)
        if before is not None and now is not None:
            attrs, links = _changed_features(before, now)
            attrs = {a for a in attrs if srule.attribute(a) is not None and srule.attribute(a).writable}
            links = {l for l in links if srule.link(l) is not None and srule.link(l).writable}
            if not attrs and not links:
                continue
        else:
            attrs = {a.name for a in srule.attributes if a.writable}
            links = {l.name for l in srule.links if l.writable}
        if trule is None or not trule.writable:
            raise UnmappableChange(f"{skind} {sid}: no writable {tkind} counterpart for {srule.source}")
        tid = to_target(sid)
        if now is None:
            if tid in ed:
                ed.remove(tid)
            continue
        mapped_attrs = {}
        for name in sorted(attrs):
            sa = srule.attribute(name)
            ta = next((a for a in trule.attributes if a.path == sa.path), None)
            if ta is None or not ta.writable:
                raise UnmappableChange(f"{skind}.{name} has no writable counterpart in {tkind}")
            mapped_attrs[ta.name] = now.attrs.get(name)
        if before is None:
            if tid in ed:
                raise UnmappableChange(f"{tkind} already has an element {tid!r}")
            ed.add(tid, trule.target, {k: v for k, v in mapped_attrs.items() if v is not None})
        else:
            if tid not in ed:
                raise UnmappableChange(f"{tkind} has no counterpart of {sid!r}")
            for k, v in mapped_attrs.items():
                ed.set(tid, k, v)
        for name in sorted(links):
            sl = srule.link(name)
            tl = next((l for l in trule.links if l.path == sl.path), None)
            if tl is None or not tl.writable:
                raise UnmappableChange(f"{skind}.{name} has no writable counterpart in {tkind}")
            pending_links.append((tid, tl.name, [to_target(t) for t in now.targets(name)]))
    # links last, so that they may point at elements added above
    for tid, ref, targets in pending_links:
        missing = [t for t in targets if t not in ed]
        if missing:
            raise UnmappableChange(f"{tkind}: link {tid}.{ref} to unknown {missing[0]!r}")
        ed.set_links(tid, ref, targets)
    return diff(target_view, ed.freeze())


# --------------------------------------------------------------------------
# adaptation analysis


@dataclass(frozen=True)
class AdaptationReport:
    proposal_id: str
    proposing_manager: str
    verdict: str
    evidence: tuple[ViolationRecord, ...]
    decision: str

    @property
    def accepted(self) -> bool:
        return self.verdict == "accepted"

    def to_dict(self) -> dict:
        return {"proposalId": self.proposal_id, "proposingManager": self.proposing_manager,
                "verdict": self.verdict, "decision": self.decision,
                "evidence": [v.to_dict() for v in self.evidence]}


def adaptation_analysis(arch_target: TypedModel, constraint_model: EvaluationModel, *, proposal_id: str,
                        proposing_manager: str, context: Mapping[str, TypedModel] | None = None,
                        mms: Mapping[str, Metamodel] | None = None,
                        view: str = "architecture") -> AdaptationReport:
    """Check a propagated (tentative) architecture model against the constraint model.

    Only critical violations reject; warnings are kept as evidence.
    """
    views = {**(context or {}), view: arch_target}
    evidence = tuple(evaluate_constraints(views, constraint_model, mms))
    if any(v.severity == CRITICAL for v in evidence):
        return AdaptationReport(proposal_id, proposing_manager, "rejected", evidence, "rollback")
    return AdaptationReport(proposal_id, proposing_manager, "accepted", evidence, "execute")


# --------------------------------------------------------------------------
# execution


@dataclass(frozen=True)
class ActionPlan:
    actions: tuple[ReconfigurationAction, ...]
    quiesce: tuple[str, ...]

    def __bool__(self) -> bool:
        return bool(self.actions)


def _host(e) -> str | None:
    hosts = e.targets("host")
    return hosts[0].split(":", 1)[1] if hosts else None


def _type(e) -> str | None:
    types = e.targets("type")
    return types[0].split(":", 1)[1] if types else None


def derive_actions(impl: TypedModel, target: TypedModel) -> ActionPlan:
    """Reconfiguration actions that turn the system described by ``impl`` into ``target``.

    Batch order: additions, new connectors, restarts and parameters,
    migrations, dropped connectors, removals. Migrated and removed instances
    must be quiesced before the batch is applied.
    """
    cur = {e.id: e for e in impl.of_type("Instance")}
    tgt = {e.id: e for e in target.of_type("Instance")}
    adds, connect, restart, params, migrate, disconnect, remove = [], [], [], [], [], [], []
    quiesce = []
    for iid in sorted(tgt):
        t = tgt[iid]
        if iid not in cur:
            adds.append(AddInstance(_type(t), _host(t), iid))
            if t.get("weight") not in (None, 1.0):
                params.append(SetParameter(iid, "weight", t.get("weight")))
            continue
        c = cur[iid]
        if _type(c) != _type(t):
            raise CoordinationError(f"{iid}: changing the component type is not a reconfiguration")
        moved = _host(c) != _host(t)
        # a migrated instance comes up running on its new node
        if c.get("state") == "failed" and t.get("state") == "running" and not moved:
            restart.append(Restart(iid))
        if c.get("weight") != t.get("weight") and t.get("weight") is not None:
            params.append(SetParameter(iid, "weight", t.get("weight")))
        if moved:
            quiesce.append(iid)
            migrate.append(MigrateInstance(iid, _host(t)))
    for iid in sorted(cur):
        if iid not in tgt:
            quiesce.append(iid)
            remove.append(RemoveInstance(iid))
    for iid in sorted(set(cur) | set(tgt)):
        before = set(cur[iid].targets("connectsTo")) if iid in cur else set()
        after = set(tgt[iid].targets("connectsTo")) if iid in tgt else set()
        connect += [Rebind(iid, t, True) for t in sorted(after - before)]
        disconnect += [Rebind(iid, t, False) for t in sorted(before - after)]
    return ActionPlan(tuple(adds + connect + restart + params + migrate + disconnect + remove),
                      tuple(sorted(set(quiesce))))


@dataclass
class ExecutionOutcome:
    view_delta: ModelDelta
    impl_delta: ModelDelta
    plan: ActionPlan
    events: tuple = ()
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def execute(descriptive: TypedModel, prescriptive: TypedModel, impl: TypedModel, spec: ViewSpec,
            store: CorrespondenceStore, impl_mm: Metamodel, sim: Simulator, *,
            quiescence_timeout: float = 30.0) -> ExecutionOutcome:
    """Derive reconfiguration actions from two views of the system and apply them.

    Instances to migrate or remove are quiesced first and the batch is
    applied once they drained. On an effector error quiesced instances are
    resumed and the error is re-raised (the simulator batch itself is atomic).
    """
    base = writable_projection(descriptive, spec)
    view_delta = diff(base, writable_projection(prescriptive, spec))
    impl_delta = sync_backward(view_delta, base, impl, spec, store, impl_mm)
    plan = derive_actions(impl, patch(impl, impl_delta))
    if not plan:
        return ExecutionOutcome(view_delta, impl_delta, plan)
    first = len(sim.events)
    quiesced = []
    try:
        for iid in plan.quiesce:
            if iid in sim.instances and sim.instances[iid].state == "running":
                sim.quiesce(iid)
                quiesced.append(iid)
        if not sim.await_quiescence(list(plan.quiesce), timeout=quiescence_timeout):
            raise NotQuiescent(f"instances did not drain within {quiescence_timeout}s")
        sim.effect(plan.actions)
    except EffectorError:
        for iid in quiesced:
            if iid in sim.instances:
                sim.resume(iid)
        raise
    return ExecutionOutcome(view_delta, impl_delta, plan, tuple(sim.events[first:]))


def closure_gap(descriptive: TypedModel, prescriptive: TypedModel, spec: ViewSpec) -> ModelDelta:
    """Writable-feature difference left between a descriptive view and its target."""
    return diff(writable_projection(descriptive, spec), writable_projection(prescriptive, spec))


# --------------------------------------------------------------------------
# rollback

Writer = Callable[[str, ModelDelta], int]


@dataclass(frozen=True)
class ProposalWrite:
    node: str
    delta: ModelDelta


def rollback(write: Writer, writes: Sequence[ProposalWrite]) -> list[ProposalWrite]:
    """Undo a proposal's model writes by applying inverse deltas in reverse order."""
    undone = []
    for w in reversed(writes):
        if not w.delta:
            continue
        inv = invert(w.delta)
        write(w.node, inv)
        undone.append(ProposalWrite(w.node, inv))
    return undone


# --------------------------------------------------------------------------
# hierarchical managers


@dataclass(frozen=True)
class Replacement:
    """Adaptation models a manager keeps in its repository for the level below."""
    name: str
    evaluation_node: str | None = None
    change_node: str | None = None


@dataclass(frozen=True)
class ManagerLevel:
    manager_id: str
    evaluation_node: str | None = None
    change_node: str | None = None
    offers: tuple[Replacement, ...] = ()


@dataclass
class ManagerStack:
    """Managers ordered bottom-up; level ``i + 1`` may replace the models of level ``i``."""
    levels: list[ManagerLevel]
    installed: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.levels:
            raise CoordinationError("a manager stack needs at least one level")

    def index(self, manager_id: str) -> int:
        for i, lvl in enumerate(self.levels):
            if lvl.manager_id == manager_id:
                return i
        raise CoordinationError(f"unknown manager {manager_id!r}")

    def next_replacement(self, manager_id: str) -> tuple[ManagerLevel, Replacement]:
        i = self.index(manager_id)
        if i + 1 >= len(self.levels):
            raise NoHigherLevel(f"no manager above {manager_id!r}")
        upper = self.levels[i + 1]
        used = self.installed.get(manager_id, 0)
        if used >= len(upper.offers):
            raise NoHigherLevel(f"{upper.manager_id} has no further models for {manager_id!r}")
        return upper, upper.offers[used]

    def mark_installed(self, manager_id: str) -> None:
        self.installed[manager_id] = self.installed.get(manager_id, 0) + 1


def escalate(megamodel: "Megamodel", stack: ManagerStack, manager_id: str,
             write: Writer | None = None) -> dict[str, Any]:
    """Install the next replacement models at the failing level.

    Only the evaluation and change model nodes of that level change; their
    new content is copied from the higher-level manager's repository nodes.
    """
    from .megamodel import ModelNode

    upper, repl = stack.next_replacement(manager_id)
    lvl = stack.levels[stack.index(manager_id)]
    if write is None:
        def write(node: str, delta: ModelDelta) -> int:
            return megamodel.write(node, delta, f"{upper.manager_id}.escalate")
    written = {}
    for source, target, kind in ((repl.evaluation_node, lvl.evaluation_node, "evaluation"),
                                 (repl.change_node, lvl.change_node, "change")):
        if source is None:
            continue
        if target is None:
            raise CoordinationError(f"{manager_id} has no {kind} model node to replace")
        new = megamodel.read(source)
        if kind == "evaluation":
            EvaluationModel.from_model(new).validate()
        else:
            cm = ChangeModel.from_model(new)
            cm.validate()
        written[target] = write(target, diff(megamodel.read(target), new))
        src_d, dst_d = megamodel.nodes[source], megamodel.nodes[target]
        if dst_d.adaptation_mode != src_d.adaptation_mode:
            megamodel.update_descriptor(ModelNode(**{**dst_d.__dict__, "adaptation_mode": src_d.adaptation_mode}))
    stack.mark_installed(manager_id)
    return {"manager": manager_id, "by": upper.manager_id, "replacement": repl.name, "written": written}
