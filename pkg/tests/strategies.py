"""Random generators shared by the property tests and the acceptance suite.

Every generator takes a ``random.Random`` so the acceptance checks can run
an exact number of cases; hypothesis tests draw that Random via
``st.randoms``.
"""
from __future__ import annotations

import random
from typing import Any

from megaloop.megamodel import Megamodel, RelationEdge, reflection
from megaloop.model import (AddElement, AddLink, Element, Metamodel, ModelDelta, RemoveElement,
                            RemoveLink, SetAttribute, TypedModel)
from megaloop.simulator import (AddInstance, Blueprint, ComponentType, Connector, InstanceSpec,
                                MigrateInstance, NodeSpec, Rebind, RemoveInstance, Restart,
                                SetParameter, Simulator)

# --------------------------------------------------------------------------
# generic models

GRAPH_MM = Metamodel.from_dict({
    "name": "Graph",
    "elementTypes": [
        {"name": "Node",
         "attributes": [{"name": "name", "kind": "string"},
                        {"name": "size", "kind": "integer", "optional": True},
                        {"name": "ratio", "kind": "real", "optional": True},
                        {"name": "on", "kind": "boolean", "optional": True},
                        {"name": "color", "kind": "enum", "literals": ["red", "green", "blue"],
                         "optional": True}],
         "references": [{"name": "next", "target": "Node", "lower": 0, "upper": None},
                        {"name": "owner", "target": "Node", "lower": 0, "upper": 1}]},
        {"name": "Leaf",
         "attributes": [{"name": "label", "kind": "string"},
                        {"name": "weight", "kind": "real", "optional": True}],
         "references": [{"name": "peer", "target": "Node", "lower": 0, "upper": None}]},
    ],
})

ID_POOL = [f"e{i}" for i in range(14)]


def _value(rng: random.Random, kind: str) -> Any:
    if kind == "string":
        return rng.choice(["a", "b", "c", ""])
    if kind == "integer":
        return rng.randint(-3, 3)
    if kind == "real":
        return rng.choice([0.0, 0.5, 1.0, 2.25, -1.5])
    if kind == "boolean":
        return rng.random() < 0.5
    return rng.choice(["red", "green", "blue"])


def _attrs(rng: random.Random, type_name: str) -> dict[str, Any]:
    et = GRAPH_MM.type(type_name)
    out = {}
    for a in et.attributes:
        if not a.optional or rng.random() < 0.5:
            out[a.name] = _value(rng, a.kind)
    return out


def random_model(rng: random.Random, max_elements: int = 10) -> TypedModel:
    """A conforming Graph model with up to ``max_elements`` elements."""
    ids = rng.sample(ID_POOL, rng.randint(0, max_elements))
    types = {i: rng.choice(["Node", "Node", "Leaf"]) for i in ids}
    nodes = [i for i in ids if types[i] == "Node"]
    ed = TypedModel("Graph", version=rng.randint(0, 5)).edit()
    for i in ids:
        ed.add(i, types[i], _attrs(rng, types[i]))
    for i in ids:
        if not nodes:
            break
        if types[i] == "Node":
            ed.set_links(i, "next", [rng.choice(nodes) for _ in range(rng.randint(0, 3))])
            if rng.random() < 0.4:
                ed.set_links(i, "owner", [rng.choice(nodes)])
        else:
            ed.set_links(i, "peer", [rng.choice(nodes) for _ in range(rng.randint(0, 2))])
    return ed.freeze()


def random_delta(rng: random.Random, model: TypedModel, steps: int = 8) -> ModelDelta:
    """An applicable delta built primitive by primitive (no use of diff)."""
    els = {e.id: (e.type, dict(e.attrs), {k: list(v) for k, v in e.links.items()}) for e in model}
    changes = []
    for _ in range(rng.randint(0, steps)):
        op = rng.choice(["add", "remove", "set", "link", "unlink"])
        nodes = sorted(i for i, (t, _, _) in els.items() if t == "Node")
        if op == "add":
            free = [i for i in ID_POOL + ["x0", "x1", "x2"] if i not in els]
            t = rng.choice(["Node", "Leaf"])
            eid = rng.choice(free)
            attrs = _attrs(rng, t)
            els[eid] = (t, attrs, {})
            changes.append(AddElement(eid, t, dict(attrs)))
        elif op == "remove" and els:
            eid = rng.choice(sorted(els))
            # drop outgoing, then incoming links first
            for ref, ts in sorted(els[eid][2].items()):
                for i in reversed(range(len(ts))):
                    changes.append(RemoveLink(eid, ref, ts[i], i))
                ts.clear()
            for other in sorted(els):
                for ref, ts in sorted(els[other][2].items()):
                    for i in reversed(range(len(ts))):
                        if ts[i] == eid:
                            changes.append(RemoveLink(other, ref, eid, i))
                            del ts[i]
            t, attrs, _ = els.pop(eid)
            changes.append(RemoveElement(eid, t, dict(attrs)))
        elif op == "set" and els:
            eid = rng.choice(sorted(els))
            t, attrs, _ = els[eid]
            a = rng.choice(GRAPH_MM.type(t).attributes)
            new = None if a.optional and rng.random() < 0.3 else _value(rng, a.kind)
            old = attrs.get(a.name)
            if old == new and type(old) is type(new):
                continue
            changes.append(SetAttribute(eid, a.name, old, new))
            if new is None:
                attrs.pop(a.name, None)
            else:
                attrs[a.name] = new
        elif op == "link" and els and nodes:
            eid = rng.choice(sorted(els))
            ref = "peer" if els[eid][0] == "Leaf" else "next"
            ts = els[eid][2].setdefault(ref, [])
            idx = rng.randint(0, len(ts))
            tgt = rng.choice(nodes)
            ts.insert(idx, tgt)
            changes.append(AddLink(eid, ref, tgt, idx))
        elif op == "unlink":
            linked = sorted((i, r) for i, (_, _, ls) in els.items() for r, ts in ls.items() if ts)
            if not linked:
                continue
            eid, ref = rng.choice(linked)
            ts = els[eid][2][ref]
            idx = rng.randrange(len(ts))
            changes.append(RemoveLink(eid, ref, ts.pop(idx), idx))
    return ModelDelta(model.version, tuple(changes))


def deep_equal(a: TypedModel, b: TypedModel) -> bool:
    """Element-wise equality written independently of the library's own comparison."""
    if a.metamodel != b.metamodel or sorted(a.elements) != sorted(b.elements):
        return False
    for eid in a.elements:
        x, y = a.elements[eid], b.elements[eid]
        if x.type != y.type:
            return False
        xa = {k: (type(v), v) for k, v in x.attrs.items() if v is not None}
        ya = {k: (type(v), v) for k, v in y.attrs.items() if v is not None}
        if xa != ya:
            return False
        if {k: list(v) for k, v in x.links.items() if v} != {k: list(v) for k, v in y.links.items() if v}:
            return False
    return True


# --------------------------------------------------------------------------
# megamodel graphs

GRAPH_KINDS = ("overlap", "refinement", "deployment", "trace", "derives")


def random_relation_graph(rng: random.Random, max_nodes: int = 12, max_edges: int = 30):
    n = rng.randint(1, max_nodes)
    nodes = [f"m{i:02d}" for i in range(n)]
    edges = []
    if n > 1:
        for k in range(rng.randint(0, max_edges)):
            a, b = rng.sample(nodes, 2)
            edges.append((f"r{k}", a, b, rng.choice(GRAPH_KINDS), rng.random() < 0.5, rng.random() < 0.7))
    return nodes, edges


def build_graph_megamodel(nodes, edges) -> Megamodel:
    mega = Megamodel()
    mega.add_metamodel(GRAPH_MM)
    for n in nodes:
        mega.register_model(reflection(n, "Graph", "system", "descriptive"), TypedModel("Graph"))
    for rid, a, b, kind, critical, directed in edges:
        mega.add_relation(RelationEdge(rid, a, b, kind, critical, directed))
    return mega


def closure_oracle(nodes, edges, start: str, critical_only: bool) -> set[str]:
    """Warshall's algorithm on a boolean matrix: reflexive-transitive closure minus start."""
    idx = {n: i for i, n in enumerate(nodes)}
    size = len(nodes)
    reach = [[i == j for j in range(size)] for i in range(size)]
    for _, a, b, _, critical, directed in edges:
        if critical_only and not critical:
            continue
        reach[idx[a]][idx[b]] = True
        if not directed:
            reach[idx[b]][idx[a]] = True
    for k in range(size):
        for i in range(size):
            if reach[i][k]:
                row_k = reach[k]
                row_i = reach[i]
                for j in range(size):
                    if row_k[j]:
                        row_i[j] = True
    s = idx[start]
    return {nodes[j] for j in range(size) if reach[s][j] and j != s}


# --------------------------------------------------------------------------
# managed systems

TIER_TYPES = (
    ComponentType("Web", "http", ("app",), 0.02),
    ComponentType("App", "app", ("db",), 0.03),
    ComponentType("Db", "db", (), 0.01),
)
PROVIDER = {"app": "App", "db": "Db"}


def random_blueprint(rng: random.Random, failure_rate: float = 0.0) -> Blueprint:
    """Three-tier system with random replication, placement and wiring."""
    types = tuple(ComponentType(t.name, t.provides, t.requires, t.service_time_mean, failure_rate)
                  for t in TIER_TYPES)
    nodes = tuple(NodeSpec(f"n{i}", rng.randint(4, 6), rng.choice([1.0, 2.0]))
                  for i in range(1, rng.randint(2, 3) + 1))
    hosted = {n.name: 0 for n in nodes}
    instances = []
    for t in types:
        for k in range(1, rng.randint(1, 2) + 1):
            node = rng.choice([n for n, c in hosted.items() if c < 4])
            hosted[node] += 1
            instances.append(InstanceSpec(f"{t.name.lower()}-{k}", t.name, node))
    connectors = []
    by_type = {t.name: [i.instance_id for i in instances if i.type_name == t.name] for t in types}
    for i in instances:
        for iface in dict((t.name, t) for t in types)[i.type_name].requires:
            providers = by_type[PROVIDER[iface]]
            for p in rng.sample(providers, rng.randint(1, len(providers))):
                connectors.append(Connector(i.instance_id, iface, p))
    return Blueprint(types, nodes, tuple(instances), tuple(connectors),
                     {"Web": rng.choice([0.0, 1.0, 3.0, 6.0])})


def random_effect(rng: random.Random, sim: Simulator) -> list:
    """A short batch of reconfiguration actions that the effector accepts."""
    insts = sorted(sim.instances)
    if not insts:
        return []
    iid = rng.choice(insts)
    inst = sim.instances[iid]
    op = rng.choice(["add", "restart", "weight", "param", "rebind", "migrate", "remove"])
    if op == "add":
        t = rng.choice(sorted(sim.types))
        room = [n for n, spec in sorted(sim.nodes.items())
                if sum(1 for i in sim.instances.values() if i.node_name == n) < spec.capacity]
        if not room:
            return []
        new = f"{t.lower()}-x{len(sim.events)}"
        acts = [AddInstance(t, rng.choice(room), new)]
        for iface in sim.types[t].requires:
            providers = sorted(i for i, x in sim.instances.items() if sim.types[x.type_name].provides == iface)
            if not providers:
                return []
            acts.append(Rebind(new, rng.choice(providers), True))
        return acts
    if op == "restart":
        return [Restart(iid)] if inst.state == "failed" else []
    if op == "weight":
        return [SetParameter(iid, "weight", rng.choice([0.5, 1.0, 2.0]))]
    if op == "param":
        return [SetParameter(iid, "poolSize", rng.randint(1, 8))]
    if op == "rebind":
        t = sim.types[inst.type_name]
        if not t.requires:
            return []
        iface = t.requires[0]
        providers = sorted(i for i, x in sim.instances.items() if sim.types[x.type_name].provides == iface)
        current = sorted(c.target for c in sim.connectors if c.source == iid)
        extra = [p for p in providers if p not in current]
        if extra:
            return [Rebind(iid, rng.choice(extra), True)]
        if len(current) > 1:
            return [Rebind(iid, rng.choice(current), False)]
        return []
    # migrate / remove need a drained instance: quiesce and wait first
    if inst.state != "running":
        return []
    sim.quiesce(iid)
    if not sim.await_quiescence([iid], timeout=5.0):
        sim.resume(iid)
        return []
    if op == "migrate":
        room = [n for n, spec in sorted(sim.nodes.items()) if n != inst.node_name
                and sum(1 for i in sim.instances.values() if i.node_name == n) < spec.capacity]
        if not room:
            sim.resume(iid)
            return []
        return [MigrateInstance(iid, rng.choice(room))]
    consumers = sorted({c.source for c in sim.connectors if c.target == iid})
    for c in consumers:
        others = [x for x in sim.connectors if x.source == c and x.target != iid
                  and x.interface == sim.types[inst.type_name].provides]
        if not others and sim.instances[c].state == "running":
            sim.resume(iid)
            return []
    acts = [Rebind(x.source, x.target, False, x.interface) for x in sim.connectors
            if iid in (x.source, x.target)]
    return acts + [RemoveInstance(iid)]


# --------------------------------------------------------------------------
# architecture-view edits

def _providers(view: TypedModel, iface: str) -> list[str]:
    return sorted(e.id for e in view.of_type("Component") if e.get("typeName") == PROVIDER.get(iface))


def _requires(type_name: str) -> tuple[str, ...]:
    return next(t.requires for t in TIER_TYPES if t.name == type_name)


def random_structural_edit(rng: random.Random, view: TypedModel, node_caps: dict[str, int],
                           with_links: bool = True, valid: bool = True, ops: int = 3) -> TypedModel:
    """Edit the writable features of a component view.

    With ``valid`` the result is realisable by the effectors: every running
    component keeps a provider for each required interface, node capacity
    holds, and failed components may only be restarted.
    """
    ed = view.edit()
    counter = 0
    for _ in range(rng.randint(1, ops)):
        cur = ed.freeze()
        comps = cur.of_type("Component")
        # additions run before removals in one batch: count old and new placements
        placed = {(c.id, c.get("node")) for c in comps} | {(c.id, c.get("node")) for c in view.of_type("Component")}
        load = {n: sum(1 for _, m in placed if m == n) for n in node_caps}
        room = sorted(n for n, cap in node_caps.items() if load[n] < cap)
        op = rng.choice(["add", "remove", "migrate", "rewire", "state"] if with_links
                        else ["add", "remove", "migrate", "state"])
        if op == "add" and room:
            t = rng.choice(TIER_TYPES)
            counter += 1
            new = f"{t.name.lower()}-n{counter}"
            while new in cur:
                counter += 1
                new = f"{t.name.lower()}-n{counter}"
            ed.add(new, "Component", {"typeName": t.name, "node": rng.choice(room), "state": "running"})
            if with_links:
                targets = []
                for iface in t.requires:
                    ps = _providers(cur, iface)
                    if not ps:
                        if valid:
                            ed.remove(new)
                            break
                        continue
                    targets += rng.sample(ps, rng.randint(1, len(ps)))
                else:
                    ed.set_links(new, "connectsTo", sorted(targets))
                    consumers = [c.id for c in comps if t.provides in _requires(c.get("typeName"))]
                    for c in rng.sample(consumers, rng.randint(0, len(consumers))):
                        ed.set_links(c, "connectsTo", sorted([*ed[c].targets("connectsTo"), new]))
        elif op == "remove" and comps:
            victim = rng.choice(comps)
            if valid and with_links:
                provides = next(t.provides for t in TIER_TYPES if t.name == victim.get("typeName"))
                stranded = [c for c in comps if victim.id in c.targets("connectsTo") and c.id != victim.id
                            and not any(x != victim.id and cur[x].get("typeName") == victim.get("typeName")
                                        for x in c.targets("connectsTo"))
                            and provides in _requires(c.get("typeName"))]
                if stranded:
                    continue
            ed.remove(victim.id)
        elif op == "migrate" and comps:
            c = rng.choice(comps)
            dest = [n for n in room if n != c.get("node")]
            if not dest:
                continue
            if valid and c.get("state") != "running":
                continue
            ed.set(c.id, "node", rng.choice(dest))
        elif op == "rewire" and comps:
            c = rng.choice(comps)
            req = _requires(c.get("typeName"))
            if not req:
                continue
            ps = _providers(cur, req[0])
            if not ps:
                continue
            lo = 1 if valid else 0
            ed.set_links(c.id, "connectsTo", sorted(rng.sample(ps, rng.randint(lo, len(ps)))))
        elif op == "state" and comps:
            c = rng.choice(comps)
            if valid:
                if c.get("state") == "failed":
                    ed.set(c.id, "state", "running")
            else:
                ed.set(c.id, "state", rng.choice(["running", "failed", "stopped"]))
    return ed.freeze()


def node_capacities(env: TypedModel) -> dict[str, int]:
    return {e.get("name"): e.get("capacity") for e in env.of_type("Node")}


def element(eid: str, type_name: str, **attrs) -> Element:
    return Element(eid, type_name, attrs)
