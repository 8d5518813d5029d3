"""Run orchestration: build the megamodel for a scenario, enact the managers'
processes on a timer against the simulator and write the run trace.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from . import megamodel as mmod
from .adaptation import ChangeModel, EvaluationModel, Infeasible, analyze, plan
from .coordination import (ManagerLevel, ManagerStack, NoHigherLevel, ProposalWrite, Replacement,
                           UnmappableChange, adaptation_analysis, closure_gap, escalate, execute,
                           propagate_changes, rollback)
from .megamodel import (Megamodel, OperationUnit, ProcessGraph, RelationEdge, Trigger, UnitContext, WriteRecord,
                        enact)
from .model import TypedModel, diff, patch
from .scenario import Scenario
from .simulator import EffectorError, Simulator, action_to_dict
from .sync import SyncEngine, build_implementation_model, monitor_update, writable_projection

log = logging.getLogger(__name__)

TRACE_SCHEMA = "megaloop.trace/1"
EXIT_OK, EXIT_CONFIG, EXIT_NO_HIGHER_LEVEL = 0, 1, 2
IMPL = "impl"
VIEW_NODES = {"architecture": "arch", "performance": "perf", "failure": "fail", "environment": "env"}


def view_node(kind: str) -> str:
    return VIEW_NODES.get(kind, kind)


def target_node(kind: str) -> str:
    return view_node(kind) + "_target"


class TraceLog:
    """Line-delimited JSON records; timestamps are simulated seconds."""

    def __init__(self):
        self.records: list[dict] = [{"schema": TRACE_SCHEMA}]

    def emit(self, t: float, kind: str, **data) -> dict:
        rec = {"t": round(t, 9), "kind": kind, **data}
        self.records.append(rec)
        return rec

    def of_kind(self, *kinds: str) -> list[dict]:
        return [r for r in self.records if r.get("kind") in kinds]

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True, default=_jsonable) for r in self.records]

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def _jsonable(x: Any) -> Any:
    if isinstance(x, (set, frozenset)):
        return sorted(x)
    if hasattr(x, "to_dict"):
        return x.to_dict()
    raise TypeError(f"not serialisable: {type(x).__name__}")


@dataclass
class Proposal:
    proposal_id: str
    manager: str
    chosen: str
    source_delta: Any
    writes: list[ProposalWrite] = field(default_factory=list)
    before: dict[str, TypedModel] = field(default_factory=dict)


@dataclass
class Runtime:
    """Services handed to every behavior."""
    scenario: Scenario
    sim: Simulator
    engine: SyncEngine
    megamodel: Megamodel
    trace: TraceLog
    stacks: dict[str, ManagerStack]
    knowledge: dict = field(default_factory=dict)
    cursor: int = 0

    def emit(self, kind: str, **data) -> dict:
        return self.trace.emit(self.sim.clock, kind, **data)

    def manager_state(self, manager_id: str) -> dict:
        return self.knowledge.setdefault(manager_id, {"vetoes": set(), "escalate": None,
                                                      "proposals": 0, "analysis": None})

    def descriptive_views(self, ctx: UnitContext) -> dict[str, TypedModel]:
        return {k: ctx.read(view_node(k)) for k in sorted(self.engine.specs)}


# --------------------------------------------------------------------------
# behaviors


class _Behavior:
    def guard(self, ctx: UnitContext) -> bool:
        return True


def _monitor_round(ctx: UnitContext) -> None:
    """Consume new sensor events into the implementation model and sync the views."""
    rt: Runtime = ctx.services
    events = rt.sim.events[rt.cursor:]
    rt.cursor = len(rt.sim.events)
    impl = ctx.read(IMPL)
    delta = monitor_update(impl, events, rt.sim.window)
    ctx.write(IMPL, delta)
    _sync_views(ctx, delta)


def _sync_views(ctx: UnitContext, delta) -> None:
    rt: Runtime = ctx.services
    if not delta:
        return
    impl = ctx.megamodel.read(IMPL)
    for kind in sorted(rt.engine.specs):
        node = view_node(kind)
        ctx.write(node, rt.engine.forward(kind, delta, impl, ctx.megamodel.read(node)))


class Monitor(_Behavior):
    def run(self, ctx):
        rt: Runtime = ctx.services
        events = rt.sim.events[rt.cursor:]
        rt.cursor = len(rt.sim.events)
        delta = monitor_update(ctx.read(IMPL), events, rt.sim.window)
        ctx.write(IMPL, delta)
        ctx.scratch["impl_delta"] = delta
        return {"events": len(events), "changes": len(delta)}


class Sync(_Behavior):
    def run(self, ctx):
        _sync_views(ctx, ctx.scratch.get("impl_delta"))


class Analyze(_Behavior):
    def run(self, ctx):
        rt: Runtime = ctx.services
        mid = ctx.params["manager"]
        em = EvaluationModel.from_model(ctx.read(f"{mid}.em"))
        arch_spec = rt.engine.specs["architecture"]
        result = analyze(rt.descriptive_views(ctx), em, reference=ctx.read(target_node("architecture")),
                         reference_view="architecture",
                         structural=lambda m: writable_projection(m, arch_spec),
                         mms=rt.scenario.metamodels)
        ctx.scratch["analysis"] = result
        rt.manager_state(mid)["analysis"] = result
        rt.emit("analysis", manager=mid, **result.to_dict())
        return {"verdict": result.verdict, "utility": result.utility}


class Plan(_Behavior):
    def guard(self, ctx):
        a = ctx.scratch.get("analysis")
        return a is not None and a.adaptation_required

    def run(self, ctx):
        rt: Runtime = ctx.services
        mid = ctx.params["manager"]
        state = rt.manager_state(mid)
        em = EvaluationModel.from_model(ctx.read(f"{mid}.em"))
        cm = ChangeModel.from_model(ctx.read(f"{mid}.cm"))
        views = rt.descriptive_views(ctx)
        try:
            result = plan(ctx.scratch["analysis"], views, cm, em, mms=rt.scenario.metamodels,
                          vetoed=sorted(state["vetoes"]), taken=set(ctx.read(IMPL).elements))
        except Infeasible as exc:
            state["escalate"] = str(exc)
            rt.emit("infeasible", manager=mid, reason=str(exc), candidates=[c.to_dict() for c in exc.candidates])
            return {"infeasible": True}
        state["proposals"] += 1
        pid = f"{mid}-{state['proposals']}"
        target = target_node(cm.view)
        before = ctx.read(target)
        delta = diff(before, result.prescriptive)
        ctx.write(target, delta)
        prop = Proposal(pid, mid, result.chosen, result.delta, [ProposalWrite(target, delta)], {target: before})
        ctx.scratch["proposal"] = prop
        rt.emit("proposal", manager=mid, proposalId=pid, chosen=result.chosen,
                predictedUtility=result.predicted_utility, view=cm.view, changes=result.delta.summary(),
                candidates=[c.to_dict() for c in result.candidates])
        if cm.view == "architecture":
            ctx.scratch["propagated"] = True
        return {"proposal": pid, "chosen": result.chosen}


class Propagate(_Behavior):
    def guard(self, ctx):
        return "proposal" in ctx.scratch and not ctx.scratch.get("propagated")

    def run(self, ctx):
        rt: Runtime = ctx.services
        prop: Proposal = ctx.scratch["proposal"]
        kind = ctx.params["view"]
        arch_t = target_node("architecture")
        arch = ctx.read(view_node("architecture"))
        try:
            mapped = propagate_changes(prop.source_delta, ctx.read(view_node(kind)), arch,
                                       rt.engine.specs[kind], rt.engine.specs["architecture"], rt.engine.store)
        except UnmappableChange as exc:
            ctx.scratch["rollback_reason"] = f"unmappable: {exc}"
            rt.emit("propagation", proposalId=prop.proposal_id, relation=ctx.params["relation"],
                    error=str(exc))
            return {"error": str(exc)}
        before = ctx.read(arch_t)
        delta = diff(before, patch(arch, mapped))
        ctx.write(arch_t, delta)
        prop.writes.append(ProposalWrite(arch_t, delta))
        prop.before.setdefault(arch_t, before)
        ctx.scratch["propagated"] = True
        rt.emit("propagation", proposalId=prop.proposal_id, relation=ctx.params["relation"],
                source=kind, target="architecture", changes=mapped.summary())
        return {"changes": len(mapped)}


class AdaptationAnalysis(_Behavior):
    def guard(self, ctx):
        return bool(ctx.scratch.get("propagated"))

    def run(self, ctx):
        rt: Runtime = ctx.services
        prop: Proposal = ctx.scratch["proposal"]
        cid = ctx.params["manager"]
        em = EvaluationModel.from_model(ctx.read(f"{cid}.em"))
        context = {"environment": ctx.read(view_node("environment"))} if "environment" in rt.engine.specs else {}
        report = adaptation_analysis(ctx.read(target_node("architecture")), em, proposal_id=prop.proposal_id,
                                     proposing_manager=prop.manager, context=context, mms=rt.scenario.metamodels)
        ctx.scratch["report"] = report
        if not report.accepted:
            ctx.scratch["rollback_reason"] = "rejected"
        rt.emit("report", manager=cid, **report.to_dict())
        return {"verdict": report.verdict}


class Execute(_Behavior):
    def guard(self, ctx):
        if not ctx.scratch.get("propagated"):
            return False
        report = ctx.scratch.get("report")
        return report.accepted if report is not None else not ctx.params.get("coordinated", False)

    def run(self, ctx):
        rt: Runtime = ctx.services
        prop: Proposal = ctx.scratch["proposal"]
        try:
            out = execute(ctx.read(view_node("architecture")), ctx.read(target_node("architecture")),
                          ctx.read(IMPL), rt.engine.specs["architecture"], rt.engine.store,
                          rt.scenario.metamodels["Implementation"], rt.sim, quiescence_timeout=5.0)
        except EffectorError as exc:
            ctx.scratch["rollback_reason"] = f"effector error: {type(exc).__name__}: {exc}"
            rt.manager_state(prop.manager)["escalate"] = str(exc)
            rt.emit("effect", proposalId=prop.proposal_id, ok=False, error=f"{type(exc).__name__}: {exc}")
            return {"ok": False}
        ctx.scratch["executed"] = True
        rt.emit("effect", proposalId=prop.proposal_id, ok=True,
                actions=[action_to_dict(a) for a in out.plan.actions], quiesced=list(out.plan.quiesce),
                events=len(out.events))
        return {"ok": True, "actions": len(out.plan.actions)}


class Rollback(_Behavior):
    def guard(self, ctx):
        return bool(ctx.scratch.get("rollback_reason"))

    def run(self, ctx):
        rt: Runtime = ctx.services
        prop: Proposal = ctx.scratch["proposal"]
        undone = rollback(ctx.write, prop.writes)
        restored = all(ctx.read(n).same_content(m) for n, m in sorted(prop.before.items()))
        state = rt.manager_state(prop.manager)
        state["vetoes"].add(prop.chosen)
        rt.emit("rollback", proposalId=prop.proposal_id, reason=ctx.scratch["rollback_reason"],
                nodes=[w.node for w in undone], restored=restored, vetoed=prop.chosen)
        return {"restored": restored}


class Closure(_Behavior):
    def guard(self, ctx):
        return bool(ctx.scratch.get("executed"))

    def run(self, ctx):
        rt: Runtime = ctx.services
        prop: Proposal = ctx.scratch["proposal"]
        _monitor_round(ctx)
        gap = closure_gap(ctx.read(view_node("architecture")), ctx.read(target_node("architecture")),
                          rt.engine.specs["architecture"])
        rt.emit("closure", proposalId=prop.proposal_id, closed=not gap, remaining=gap.summary())
        return {"closed": not gap}


class Escalate(_Behavior):
    def run(self, ctx):
        rt: Runtime = ctx.services
        lower = ctx.params["supervises"]
        info = escalate(ctx.megamodel, rt.stacks[lower], lower, write=ctx.write)
        state = rt.manager_state(lower)
        reason = state["escalate"]
        state["escalate"] = None
        state["vetoes"].clear()
        rt.emit("escalation", reason=reason, **info)
        return {"replacement": info["replacement"]}


BEHAVIORS = {
    "monitor": Monitor(), "sync": Sync(), "analyze": Analyze(), "plan": Plan(), "propagate": Propagate(),
    "adaptationAnalysis": AdaptationAnalysis(), "execute": Execute(), "rollback": Rollback(),
    "closure": Closure(), "escalate": Escalate(),
}


# --------------------------------------------------------------------------
# megamodel construction


def build_megamodel(scenario: Scenario, impl: TypedModel, views: dict[str, TypedModel]) -> Megamodel:
    """Nodes, relations, units and processes for the scenario's managers."""
    mm = Megamodel(check_conformance=True)
    for m in scenario.metamodels.values():
        mm.add_metamodel(m)
    kinds = sorted(scenario.view_specs)
    specs = scenario.view_specs
    mm.register_model(mmod.reflection(IMPL, impl.metamodel, "system", "descriptive",
                                      label="implementation model"), impl)
    for k in kinds:
        subject = "environment" if k == "environment" else "system"
        mm.register_model(mmod.reflection(view_node(k), specs[k].metamodel, subject, "descriptive",
                                          analyzable=k != "environment", label=f"{k} model"), views[k])
    planned = sorted({m.change.view for m in scenario.concerns()} | {"architecture"})
    for k in planned:
        mm.register_model(mmod.reflection(target_node(k), specs[k].metamodel, "system", "prescriptive",
                                          label=f"{k} model (target)"),
                          TypedModel(views[k].metamodel, views[k].elements))
    for m in scenario.managers:
        if m.evaluation is not None:
            mm.register_model(mmod.adaptation(f"{m.manager_id}.em", "EvaluationModel", "evaluation", "implicit",
                                              label=f"{m.manager_id} evaluation model"), m.evaluation.to_model())
        if m.change is not None:
            mm.register_model(mmod.adaptation(f"{m.manager_id}.cm", "ChangeModel", "change", m.change.mode,
                                              label=f"{m.manager_id} change model"), m.change.to_model())
        for o in m.offers:
            if o.evaluation is not None:
                mm.register_model(mmod.adaptation(f"{m.manager_id}.repo.{o.name}.em", "EvaluationModel",
                                                  "evaluation", "implicit"), o.evaluation.to_model())
            if o.change is not None:
                mm.register_model(mmod.adaptation(f"{m.manager_id}.repo.{o.name}.cm", "ChangeModel", "change",
                                                  o.change.mode), o.change.to_model())

    descriptive = tuple(view_node(k) for k in kinds)
    arch, arch_t = view_node("architecture"), target_node("architecture")
    mm.add_unit(OperationUnit("monitor", "write", (IMPL,), (IMPL,), "monitor"))
    mm.add_unit(OperationUnit("sync", "write", (IMPL,), descriptive, "sync"))
    for k in kinds:
        mm.add_relation(RelationEdge(f"sync:{view_node(k)}", IMPL, view_node(k), "synchronization",
                                     critical=True, directed=False, unit="sync"))
    mm.add_relation(RelationEdge("refinement:arch-impl", arch, IMPL, "refinement", critical=True))
    if "environment" in specs:
        mm.add_relation(RelationEdge("deployment:arch-env", arch, "env", "deployment"))
    others = [view_node(k) for k in kinds if k not in ("architecture", "environment")]
    for n in others:
        mm.add_relation(RelationEdge(f"overlap:{n}-arch", n, arch, "overlap", directed=False))
    for a, b in zip(others, others[1:]):
        mm.add_relation(RelationEdge(f"overlap:{a}-{b}", a, b, "overlap", directed=False))
    for k in planned:
        mm.add_relation(RelationEdge(f"derives:{view_node(k)}", view_node(k), target_node(k), "derives"))
    mm.add_relation(RelationEdge("trace:arch", arch_t, arch, "trace"))

    coord = scenario.coordinator()
    if coord is not None:
        ctx_nodes = (arch_t, f"{coord.manager_id}.em") + (("env",) if "environment" in specs else ())
        mm.add_unit(OperationUnit(f"{coord.manager_id}.adaptationAnalysis", "apply", ctx_nodes, (),
                                  "adaptationAnalysis", {"manager": coord.manager_id}))
    for m in scenario.concerns():
        mid, kind = m.manager_id, m.change.view
        tgt = target_node(kind)
        inputs = descriptive + (arch_t,)
        mm.add_unit(OperationUnit(f"{mid}.analyze", "apply", inputs + (f"{mid}.em",), (), "analyze",
                                  {"manager": mid}))
        mm.add_unit(OperationUnit(f"{mid}.plan", "apply", descriptive + (IMPL, f"{mid}.em", f"{mid}.cm"), (tgt,),
                                  "plan", {"manager": mid}))
        chain = ["monitor", "sync", f"{mid}.analyze", f"{mid}.plan"]
        edges = list(zip(chain, chain[1:]))
        touched = (tgt,) if kind == "architecture" else (tgt, arch_t)
        mm.add_unit(OperationUnit(f"{mid}.rollback", "write", touched, touched, "rollback", {"manager": mid}))
        if kind != "architecture":
            rel = f"changePropagation:{view_node(kind)}-arch"
            mm.add_unit(OperationUnit(f"{mid}.propagate", "write", (tgt, view_node(kind), arch, arch_t), (arch_t,),
                                      "propagate", {"manager": mid, "view": kind, "relation": rel}))
            mm.add_relation(RelationEdge(rel, tgt, arch_t, "changePropagation", critical=True,
                                         unit=f"{mid}.propagate"))
            edges += [(f"{mid}.plan", f"{mid}.propagate"), (f"{mid}.propagate", f"{mid}.rollback")]
            last = f"{mid}.propagate"
        else:
            last = f"{mid}.plan"
        units = chain + ([f"{mid}.propagate"] if kind != "architecture" else [])
        if coord is not None:
            aa = f"{coord.manager_id}.adaptationAnalysis"
            units.append(aa)
            edges += [(last, aa), (aa, f"{mid}.rollback")]
            last = aa
        mm.add_unit(OperationUnit(f"{mid}.execute", "read", (arch, arch_t, IMPL), (), "execute",
                                  {"manager": mid, "coordinated": coord is not None}))
        mm.add_unit(OperationUnit(f"{mid}.closure", "write", (IMPL,) + descriptive + (arch_t,),
                                  (IMPL,) + descriptive, "closure", {"manager": mid}))
        units += [f"{mid}.execute", f"{mid}.rollback", f"{mid}.closure"]
        edges += [(last, f"{mid}.execute"), (f"{mid}.execute", f"{mid}.rollback"),
                  (f"{mid}.execute", f"{mid}.closure")]
        mm.add_process(ProcessGraph(mid, tuple(units), tuple(edges), Trigger("timer", scenario.period)))
        for sup in scenario.supervisors_of(mid):
            repo = tuple(n for o in sup.offers for n in (f"{sup.manager_id}.repo.{o.name}.em",
                                                          f"{sup.manager_id}.repo.{o.name}.cm") if n in mm.nodes)
            lower = (f"{mid}.em", f"{mid}.cm")
            uid = f"{sup.manager_id}.escalate"
            mm.add_unit(OperationUnit(uid, "write", repo + lower, lower, "escalate",
                                      {"manager": sup.manager_id, "supervises": mid}))
            mm.add_process(ProcessGraph(sup.manager_id, (uid,), (), Trigger("event", None, "Infeasible")))
    return mm


def build_stacks(scenario: Scenario, megamodel: Megamodel) -> dict[str, ManagerStack]:
    stacks = {}
    for m in scenario.concerns():
        levels = [ManagerLevel(m.manager_id, f"{m.manager_id}.em", f"{m.manager_id}.cm")]
        for sup in scenario.supervisors_of(m.manager_id):
            offers = tuple(Replacement(o.name,
                                       f"{sup.manager_id}.repo.{o.name}.em" if o.evaluation else None,
                                       f"{sup.manager_id}.repo.{o.name}.cm" if o.change else None)
                           for o in sup.offers)
            levels.append(ManagerLevel(sup.manager_id, offers=offers))
        stacks[m.manager_id] = ManagerStack(levels)
    return stacks


# --------------------------------------------------------------------------
# the run


@dataclass
class RunResult:
    status: int
    trace: TraceLog
    megamodel: Megamodel
    sim: Simulator
    runtime: Runtime
    message: str = ""

    def write(self, out: str | Path) -> Path:
        out = Path(out)
        (out / "models").mkdir(parents=True, exist_ok=True)
        (out / "trace.jsonl").write_text(self.trace.text())
        (out / "megamodel.json").write_text(self.megamodel.export_json())
        (out / "megamodel.dot").write_text(self.megamodel.export_dot())
        with open(out / "events.jsonl", "w") as fp:
            self.sim.write_event_log(fp)
        for node, model in sorted(self.megamodel.models.items()):
            (out / "models" / f"{node}.json").write_text(json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n")
        (out / "correspondences.json").write_text(
            json.dumps(self.runtime.engine.store.to_dict(), indent=1, sort_keys=True) + "\n")
        return out


def run(scenario: Scenario, *, seed: int | None = None, until: float | None = None,
        out: str | Path | None = None,
        observers: Sequence[Callable[[WriteRecord], None]] = ()) -> RunResult:
    """Enact the scenario's managers every ``period`` simulated seconds until ``until``.

    ``observers`` are called with every model write, after the trace record.
    """
    seed = scenario.seed if seed is None else seed
    until = scenario.run_length if until is None else until
    sim = Simulator(scenario.blueprint, seed)
    for ev in scenario.timeline:
        if ev.kind in ("LoadChanged", "InjectFailure"):
            sim.schedule(ev.time, ev.kind, **ev.data)
    engine = SyncEngine(scenario.view_specs, scenario.metamodels["Implementation"])
    impl = build_implementation_model(sim.sense())
    views = engine.initial_views(impl)
    mega = build_megamodel(scenario, impl, views)
    trace = TraceLog()
    rt = Runtime(scenario, sim, engine, mega, trace, build_stacks(scenario, mega))
    mega.observers.append(lambda w: rt.emit("write", node=w.node, version=w.version, writer=w.writer,
                                            changes=w.delta.summary()))
    mega.observers.extend(observers)
    rt.emit("start", scenario=scenario.name, seed=seed, until=until, period=scenario.period)
    goals = [ev for ev in scenario.timeline if ev.kind == "InstallGoal"]
    status, message = EXIT_OK, ""
    tick = 0
    try:
        while True:
            tick += 1
            t = tick * scenario.period
            if t > until + 1e-9:
                break
            sim.advance_to(t)
            while goals and goals[0].time <= t:
                g = goals.pop(0)
                node = f"{g.data['manager']}.em"
                mega.write(node, diff(mega.read(node), g.data["evaluation"].to_model()), "operator")
                rt.emit("goal", manager=g.data["manager"], file=g.data["evaluationModel"])
            for m in scenario.concerns():
                _enact(rt, m.manager_id, "timer")
                state = rt.manager_state(m.manager_id)
                if state["escalate"] is not None:
                    sups = scenario.supervisors_of(m.manager_id)
                    if not sups:
                        raise NoHigherLevel(f"{m.manager_id}: {state['escalate']}")
                    _enact(rt, sups[0].manager_id, "Infeasible")
            rt.emit("utility", values={mid: s["analysis"].utility for mid, s in sorted(rt.knowledge.items())
                                       if s.get("analysis") is not None})
    except NoHigherLevel as exc:
        status, message = EXIT_NO_HIGHER_LEVEL, f"no higher level: {exc}"
    rt.emit("end", status=status, message=message)
    result = RunResult(status, trace, mega, sim, rt, message)
    if out is not None:
        result.write(out)
    return result


def _enact(rt: Runtime, process_id: str, trigger: str) -> None:
    tr = enact(rt.megamodel, process_id, BEHAVIORS, trigger=trigger, clock=lambda: rt.sim.clock,
               services=rt, knowledge=rt.knowledge)
    rt.emit("enactment", process=process_id, trigger=trigger, units=[r.to_dict() for r in tr.records])
    for f in tr.failures:
        if isinstance(f.cause, NoHigherLevel):
            raise f.cause
    tr.raise_for_failure()
