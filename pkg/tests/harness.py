"""End-to-end property checks shared by unit tests and the acceptance suite."""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from megaloop.adaptation import EvaluationModel
from megaloop.coordination import adaptation_analysis, closure_gap, execute
from megaloop.model import ModelDelta, conforms, diff, patch
from megaloop.simulator import EffectorError, Simulator
from megaloop.sync import (VIEW_KINDS, ReadOnlyFeature, SyncEngine, build_implementation_model,
                           load_view_spec, monitor_update, project, standard_metamodels, sync_backward,
                           sync_forward, writable_projection)

from strategies import deep_equal, node_capacities, random_blueprint, random_effect, random_structural_edit

MMS = standard_metamodels()
IMPL_MM = MMS["Implementation"]
SPECS = {k: load_view_spec(k) for k in VIEW_KINDS}


@dataclass
class SyncTally:
    steps: int = 0
    hippocratic: int = 0
    correct: int = 0
    converged: int = 0
    read_only: int = 0
    failures: list[str] = field(default_factory=list)


def _check(tally: SyncTally, ok: bool, what: str) -> bool:
    if not ok:
        tally.failures.append(what)
    return ok


def sync_sequence(rng: random.Random, tally: SyncTally, steps: int = 4) -> None:
    """Drive a random system through a sequence of changes and check every view after each.

    Per step and view kind: hippocraticness (empty in, empty out, both
    directions), correctness against the batch projection, and one-pass
    convergence of a random legal edit pushed backwards then forwards.
    """
    sim = Simulator(random_blueprint(rng, failure_rate=rng.choice([0.0, 0.0, 50.0])), rng.randrange(10 ** 6))
    sim.advance(rng.uniform(0.5, 12.0))
    impl = build_implementation_model(sim.sense())
    cursor = len(sim.events)
    engine = SyncEngine(SPECS, IMPL_MM)
    views = engine.initial_views(impl)
    for _ in range(steps):
        tally.steps += 1
        if rng.random() < 0.5:
            if rng.random() < 0.3:
                sim.schedule(sim.clock + rng.uniform(0, 3), "LoadChanged", entryType="Web",
                             rate=rng.choice([0.0, 2.0, 8.0]))
            if rng.random() < 0.3:
                sim.schedule(sim.clock + rng.uniform(0, 3), "InjectFailure",
                             instanceId=rng.choice(sorted(sim.instances)))
            sim.advance(rng.uniform(0.5, 25.0))
        else:
            acts = random_effect(rng, sim)
            try:
                sim.effect(acts)
            except EffectorError:
                pass
            for iid, inst in sorted(sim.instances.items()):
                if inst.state == "quiescing":
                    sim.resume(iid)
        events = sim.events[cursor:]
        cursor = len(sim.events)
        delta = monitor_update(impl, events, sim.window)
        impl = patch(impl, delta)
        _check(tally, deep_equal(impl, build_implementation_model(sim.sense())), "monitor != snapshot rebuild")
        _check(tally, conforms(impl, IMPL_MM).conforms, "implementation model does not conform")
        for kind in VIEW_KINDS:
            spec = SPECS[kind]
            view = views[kind]
            # hippocraticness
            ok = (not engine.forward(kind, ModelDelta(impl.version), impl, view)
                  and not engine.backward(kind, ModelDelta(view.version), view, impl))
            if _check(tally, ok, f"{kind}: empty delta produced changes"):
                tally.hippocratic += 1
            vd = engine.forward(kind, delta, impl, view)
            view = views[kind] = patch(view, vd)
            batch, _ = project(impl, spec)
            ok = deep_equal(view, batch) and conforms(view, MMS[spec.metamodel]).conforms
            engine.store.check(impl, view, kind)
            if _check(tally, ok, f"{kind}: incremental view differs from batch projection"):
                tally.correct += 1
            _convergence(rng, tally, kind, impl, view, engine)


def _convergence(rng, tally: SyncTally, kind: str, impl, view, engine: SyncEngine) -> None:
    spec = SPECS[kind]
    env = project(impl, SPECS["environment"])[0]
    caps = node_capacities(env)
    if kind == "environment":
        nodes = env.of_type("Node")
        if not nodes:
            return
        n = rng.choice(nodes)
        ed = view.edit()
        ed.set(n.id, "capacity", n.get("capacity") + 1)
        try:
            sync_backward(diff(view, ed.freeze()), view, impl, spec, engine.store.copy(), IMPL_MM)
        except ReadOnlyFeature:
            tally.read_only += 1
        else:
            tally.failures.append("environment: write to a read-only view was accepted")
        return
    edited = random_structural_edit(rng, view, caps, with_links=kind != "failure", valid=False)
    vdelta = diff(view, edited)
    store = engine.store.copy()
    idelta = sync_backward(vdelta, view, impl, spec, store, IMPL_MM)
    impl2 = patch(impl, idelta)
    fwd = sync_forward(idelta, impl2, view, spec, store)
    view2 = patch(view, fwd)
    ok = (conforms(impl2, IMPL_MM).conforms
          and deep_equal(writable_projection(view2, spec), writable_projection(edited, spec))
          and deep_equal(view2, project(impl2, spec)[0])
          and not sync_backward(diff(writable_projection(view2, spec), writable_projection(edited, spec)),
                                view2, impl2, spec, store, IMPL_MM))
    if _check(tally, ok, f"{kind}: backward then forward did not converge in one pass"):
        tally.converged += 1


# --------------------------------------------------------------------------
# causal closure

CLOSURE_CONSTRAINTS = EvaluationModel.from_dict({
    "constraints": [
        {"constraintId": "nodeCapacity", "view": "architecture", "severity": "critical",
         "predicate": "all(count(c for c in elements('Component') if c.node == n.name) <= n.capacity"
                      " for n in environment('Node'))"},
        {"constraintId": "maxPerType", "view": "architecture", "severity": "critical",
         "predicate": "all(count(c for c in elements('Component') if c.typeName == t) <= 2"
                      " for t in ['Web', 'App', 'Db'])"},
        {"constraintId": "dbOnFastNode", "view": "architecture", "scopeType": "Component", "severity": "warning",
         "predicate": "typeName != 'Db' or node == 'n1'"},
    ],
})


@dataclass
class ClosureResult:
    accepted: bool
    gap: ModelDelta | None = None
    actions: int = 0
    error: str | None = None


def closure_case(rng: random.Random) -> ClosureResult | None:
    """Generate one plan; if the coordinator accepts it, execute and re-sense.

    Returns ``None`` when the generated target equals the current system.
    """
    sim = Simulator(random_blueprint(rng), rng.randrange(10 ** 6))
    if rng.random() < 0.4:
        sim.schedule(rng.uniform(1.0, 8.0), "InjectFailure", instanceId=rng.choice(sorted(sim.instances)))
    sim.advance(10.0 + rng.uniform(0.0, 5.0))
    impl = build_implementation_model(sim.sense())
    cursor = len(sim.events)
    engine = SyncEngine(SPECS, IMPL_MM)
    views = engine.initial_views(impl)
    arch, env = views["architecture"], views["environment"]
    target = random_structural_edit(rng, arch, node_capacities(env), valid=True)
    if target.same_content(arch):
        return None
    report = adaptation_analysis(target, CLOSURE_CONSTRAINTS, proposal_id="gen", proposing_manager="gen",
                                 context={"environment": env}, mms=MMS)
    if not report.accepted:
        return ClosureResult(False)
    spec = SPECS["architecture"]
    try:
        out = execute(arch, target, impl, spec, engine.store, IMPL_MM, sim)
    except EffectorError as exc:
        return ClosureResult(True, error=f"{type(exc).__name__}: {exc}")
    delta = monitor_update(impl, sim.events[cursor:], sim.window)
    impl = patch(impl, delta)
    arch2 = patch(arch, engine.forward("architecture", delta, impl, arch))
    return ClosureResult(True, closure_gap(arch2, target, spec), len(out.plan.actions))
