"""Discrete-event simulation of a component-based server application.

The simulated system is the managed system of the feedback loop: it exposes
a sensor interface (:meth:`Simulator.sense`, the event log) and an effector
interface (:meth:`Simulator.effect`, :meth:`Simulator.quiesce`).

Workload model: Poisson arrivals per entry component type, FIFO single-server
instances with exponential service times (mean scaled by node speed), and
per-request failures drawn with the type's failure rate.  A completed
request issues one sub-request per connected required interface.
"""
from __future__ import annotations

import copy
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence, TextIO, Union

RUNNING, FAILED, QUIESCING, STOPPED = "running", "failed", "quiescing", "stopped"
INSTANCE_STATES = (RUNNING, FAILED, QUIESCING, STOPPED)
DEFAULT_WINDOW = 10.0


class EffectorError(Exception):
    pass


class NotQuiescent(EffectorError):
    pass


class UnknownTarget(EffectorError):
    pass


class CapacityExceeded(EffectorError):
    pass


class InvalidAction(EffectorError):
    pass


# --------------------------------------------------------------------------
# blueprint


@dataclass(frozen=True)
class ComponentType:
    name: str
    provides: str
    requires: tuple[str, ...] = ()
    service_time_mean: float = 0.05
    failure_rate: float = 0.0  # failures per 1000 requests


@dataclass(frozen=True)
class NodeSpec:
    name: str
    capacity: int
    speed: float = 1.0


@dataclass(frozen=True)
class InstanceSpec:
    instance_id: str
    type_name: str
    node_name: str


@dataclass(frozen=True)
class Connector:
    source: str
    interface: str
    target: str


@dataclass(frozen=True)
class Blueprint:
    types: tuple[ComponentType, ...]
    nodes: tuple[NodeSpec, ...]
    instances: tuple[InstanceSpec, ...] = ()
    connectors: tuple[Connector, ...] = ()
    workloads: Mapping[str, float] = field(default_factory=dict)
    window: float = DEFAULT_WINDOW

    @classmethod
    def from_dict(cls, d: Mapping) -> "Blueprint":
        return cls(
            types=tuple(ComponentType(t["name"], t["provides"], tuple(t.get("requires", ())),
                                      float(t.get("serviceTimeMean", 0.05)),
                                      float(t.get("failureRate", 0.0)))
                        for t in d["componentTypes"]),
            nodes=tuple(NodeSpec(n["name"], int(n["capacity"]), float(n.get("speed", 1.0)))
                        for n in d["nodes"]),
            instances=tuple(InstanceSpec(i["instanceId"], i["typeName"], i["nodeName"])
                            for i in d.get("instances", [])),
            connectors=tuple(Connector(c["from"], c["interface"], c["to"])
                             for c in d.get("connectors", [])),
            workloads={w["entryType"]: float(w["rate"]) for w in d.get("workloads", [])},
            window=float(d.get("window", DEFAULT_WINDOW)),
        )

    def to_dict(self) -> dict:
        return {
            "componentTypes": [{"name": t.name, "provides": t.provides, "requires": list(t.requires),
                                "serviceTimeMean": t.service_time_mean, "failureRate": t.failure_rate}
                               for t in self.types],
            "nodes": [{"name": n.name, "capacity": n.capacity, "speed": n.speed} for n in self.nodes],
            "instances": [{"instanceId": i.instance_id, "typeName": i.type_name, "nodeName": i.node_name}
                          for i in self.instances],
            "connectors": [{"from": c.source, "interface": c.interface, "to": c.target}
                           for c in self.connectors],
            "workloads": [{"entryType": k, "rate": v} for k, v in sorted(self.workloads.items())],
            "window": self.window,
        }


# --------------------------------------------------------------------------
# sensor side


@dataclass(frozen=True)
class SensorEvent:
    time: float
    kind: str
    subject: str | None = None
    data: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"t": self.time, "kind": self.kind, "subject": self.subject, "data": dict(self.data)}


@dataclass(frozen=True)
class WindowMetrics:
    arrivals: int = 0
    completed: int = 0
    failed: int = 0
    avg_response_time: float = 0.0
    utilization: float = 0.0
    in_flight_start: int = 0
    in_flight_end: int = 0

    def to_dict(self) -> dict:
        return {"arrivals": self.arrivals, "completed": self.completed, "failed": self.failed,
                "avgResponseTime": self.avg_response_time, "utilization": self.utilization,
                "inFlightStart": self.in_flight_start, "inFlightEnd": self.in_flight_end}

    @classmethod
    def from_dict(cls, d: Mapping) -> "WindowMetrics":
        return cls(d["arrivals"], d["completed"], d["failed"], d["avgResponseTime"],
                   d["utilization"], d["inFlightStart"], d["inFlightEnd"])

    def conserved(self) -> bool:
        return self.in_flight_start + self.arrivals == self.completed + self.failed + self.in_flight_end


@dataclass(frozen=True)
class InstanceView:
    instance_id: str
    type_name: str
    node_name: str
    state: str
    weight: float
    in_flight: int
    parameters: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class SensorSnapshot:
    time: float
    types: tuple[ComponentType, ...]
    nodes: tuple[NodeSpec, ...]
    instances: tuple[InstanceView, ...]
    connectors: tuple[Connector, ...]
    workloads: Mapping[str, float]
    window: float
    window_end: float
    metrics: Mapping[str, WindowMetrics]
    dropped: int


# --------------------------------------------------------------------------
# effector side


@dataclass(frozen=True)
class AddInstance:
    type_name: str
    node_name: str
    instance_id: str


@dataclass(frozen=True)
class RemoveInstance:
    instance_id: str


@dataclass(frozen=True)
class Rebind:
    """Add (``connect=True``) or remove a connector."""
    source: str
    target: str
    connect: bool = True
    interface: str | None = None


@dataclass(frozen=True)
class Restart:
    instance_id: str


@dataclass(frozen=True)
class SetParameter:
    instance_id: str
    name: str
    value: Any


@dataclass(frozen=True)
class MigrateInstance:
    instance_id: str
    target_node: str


ReconfigurationAction = Union[AddInstance, RemoveInstance, Rebind, Restart, SetParameter, MigrateInstance]


def action_to_dict(a: ReconfigurationAction) -> dict:
    return {"action": type(a).__name__, **a.__dict__}


@dataclass(frozen=True)
class EffectResult:
    applied: tuple[ReconfigurationAction, ...]
    events: tuple[SensorEvent, ...]


# --------------------------------------------------------------------------
# simulation state


@dataclass
class _Request:
    rid: int
    arrived: float


@dataclass
class _Instance:
    instance_id: str
    type_name: str
    node_name: str
    state: str = RUNNING
    weight: float = 1.0
    parameters: dict = field(default_factory=dict)
    queue: list = field(default_factory=list)  # head is in service
    epoch: int = 0
    busy_since: float | None = None
    # window accumulators
    arrivals: int = 0
    completed: int = 0
    failed: int = 0
    busy: float = 0.0
    resp_sum: float = 0.0
    in_flight_start: int = 0

    @property
    def in_flight(self) -> int:
        return len(self.queue)

    @property
    def accepting(self) -> bool:
        return self.state == RUNNING


class Simulator:
    """Seeded, single-threaded discrete-event simulator.

    Identical seed and identical sequence of ``advance``/``effect`` calls
    produce identical event logs.
    """

    def __init__(self, blueprint: Blueprint, seed: int):
        self.blueprint = blueprint
        self.seed = seed
        self.rng = random.Random(seed)
        self.window = blueprint.window
        self.clock = 0.0
        self.types = {t.name: t for t in blueprint.types}
        self.nodes = {n.name: n for n in blueprint.nodes}
        self.instances: dict[str, _Instance] = {}
        self.connectors: list[Connector] = []
        self.workloads: dict[str, float] = dict(blueprint.workloads)
        self.events: list[SensorEvent] = []
        self.dropped = 0
        self._queue: list = []
        self._seq = 0
        self._rid = 0
        self._arrival_epoch: dict[str, int] = {}
        self.window_start = 0.0
        self.last_window_end = 0.0
        self.last_metrics: dict[str, WindowMetrics] = {}
        for spec in blueprint.instances:
            self._check_add(spec.type_name, spec.node_name, spec.instance_id)
            self.instances[spec.instance_id] = _Instance(spec.instance_id, spec.type_name, spec.node_name)
        for c in blueprint.connectors:
            self._check_connector(c)
            self.connectors.append(c)
        self.connectors.sort(key=_connector_key)
        problems = self._invariant_problems()
        if problems:
            raise InvalidAction("blueprint: " + problems[0])
        for entry in sorted(self.workloads):
            self._schedule_arrival(entry)
        self._push(self.window, "window", None)

    # -- event queue

    def _push(self, time: float, kind: str, payload: Any) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, kind, payload))

    def _emit(self, kind: str, subject: str | None = None, **data) -> SensorEvent:
        ev = SensorEvent(self.clock, kind, subject, data)
        self.events.append(ev)
        return ev

    def schedule(self, time: float, kind: str, **payload) -> None:
        """Script an environment event: ``LoadChanged`` or ``InjectFailure``."""
        if kind not in ("LoadChanged", "InjectFailure"):
            raise ValueError(f"cannot script {kind!r}")
        if time < self.clock:
            raise ValueError("cannot schedule in the past")
        self._push(time, "scripted:" + kind, payload)

    def _schedule_arrival(self, entry: str) -> None:
        epoch = self._arrival_epoch.get(entry, 0) + 1
        self._arrival_epoch[entry] = epoch
        rate = self.workloads.get(entry, 0.0)
        if rate > 0:
            self._push(self.clock + self.rng.expovariate(rate), "arrival", (entry, epoch))

    def advance(self, duration: float) -> list[SensorEvent]:
        if duration <= 0:
            raise ValueError("duration must be positive")
        return self.advance_to(self.clock + duration)

    def advance_to(self, until: float) -> list[SensorEvent]:
        first = len(self.events)
        while self._queue and self._queue[0][0] <= until:
            time, _, kind, payload = heapq.heappop(self._queue)
            self.clock = time
            self._dispatch(kind, payload)
        self.clock = max(self.clock, until)
        return self.events[first:]

    def _dispatch(self, kind: str, payload: Any) -> None:
        if kind == "arrival":
            entry, epoch = payload
            if epoch != self._arrival_epoch.get(entry):
                return
            self._route(entry, None)
            self._schedule_arrival(entry)
        elif kind == "done":
            iid, epoch = payload
            inst = self.instances.get(iid)
            if inst is not None and inst.epoch == epoch:
                self._complete(inst)
        elif kind == "window":
            self._close_window()
            self._push(self.clock + self.window, "window", None)
        elif kind == "scripted:LoadChanged":
            entry, rate = payload["entryType"], float(payload["rate"])
            self.workloads[entry] = rate
            self._emit("LoadChanged", "load:" + entry, entryType=entry, rate=rate)
            self._schedule_arrival(entry)
        elif kind == "scripted:InjectFailure":
            inst = self.instances.get(payload["instanceId"])
            if inst is not None and inst.state in (RUNNING, QUIESCING):
                self._fail_instance(inst, "injected")

    # -- request flow

    def _pick(self, candidates: Iterable[_Instance]) -> _Instance | None:
        best = None
        for inst in candidates:
            if not inst.accepting:
                continue
            key = ((inst.in_flight + 1) / inst.weight, inst.instance_id)
            if best is None or key < best[0]:
                best = (key, inst)
        return best[1] if best else None

    def _route(self, entry_type: str | None, source: tuple[str, str] | None) -> None:
        if source is None:
            target = self._pick(i for i in self.instances.values() if i.type_name == entry_type)
            where = entry_type
        else:
            iid, iface = source
            target = self._pick(self.instances[c.target] for c in self.connectors
                                if c.source == iid and c.interface == iface and c.target in self.instances)
            where = f"{iid}.{iface}"
        if target is None:
            self.dropped += 1
            self._emit("RequestDropped", None, at=where)
            return
        self._arrive(target)

    def _arrive(self, inst: _Instance) -> None:
        self._rid += 1
        inst.arrivals += 1
        node = self.nodes[inst.node_name]
        load = sum(i.in_flight for i in self.instances.values() if i.node_name == inst.node_name)
        if load >= node.capacity:
            inst.failed += 1
            self._emit("RequestFailed", inst.instance_id, reason="capacity")
            return
        inst.queue.append(_Request(self._rid, self.clock))
        if len(inst.queue) == 1:
            self._start_service(inst)

    def _start_service(self, inst: _Instance) -> None:
        t = self.types[inst.type_name]
        speed = self.nodes[inst.node_name].speed
        inst.busy_since = self.clock
        self._push(self.clock + self.rng.expovariate(speed / t.service_time_mean), "done",
                   (inst.instance_id, inst.epoch))

    def _stop_busy(self, inst: _Instance) -> None:
        if inst.busy_since is not None:
            inst.busy += self.clock - max(inst.busy_since, self.window_start)
            inst.busy_since = None

    def _complete(self, inst: _Instance) -> None:
        req = inst.queue.pop(0)
        self._stop_busy(inst)
        t = self.types[inst.type_name]
        if self.rng.random() < t.failure_rate / 1000.0:
            inst.failed += 1
            self._emit("RequestFailed", inst.instance_id, reason="service")
        else:
            rt = self.clock - req.arrived
            inst.completed += 1
            inst.resp_sum += rt
            self._emit("RequestCompleted", inst.instance_id, responseTime=rt)
            for iface in t.requires:
                self._route(None, (inst.instance_id, iface))
        if inst.queue:
            self._start_service(inst)

    def _fail_instance(self, inst: _Instance, reason: str) -> None:
        self._stop_busy(inst)
        inst.epoch += 1
        inst.failed += len(inst.queue)
        inst.queue.clear()
        inst.state = FAILED
        self._emit("InstanceFailed", inst.instance_id, reason=reason)

    def _close_window(self) -> None:
        metrics = {}
        for iid in sorted(self.instances):
            inst = self.instances[iid]
            if inst.busy_since is not None:
                inst.busy += self.clock - max(inst.busy_since, self.window_start)
            avg = inst.resp_sum / inst.completed if inst.completed else 0.0
            metrics[iid] = WindowMetrics(inst.arrivals, inst.completed, inst.failed, avg,
                                         min(1.0, inst.busy / self.window), inst.in_flight_start,
                                         inst.in_flight)
            inst.arrivals = inst.completed = inst.failed = 0
            inst.busy = inst.resp_sum = 0.0
            inst.in_flight_start = inst.in_flight
        self.window_start = self.clock
        self.last_window_end = self.clock
        self.last_metrics = metrics
        self._emit("WindowClosed", None, start=self.clock - self.window, end=self.clock,
                   metrics={k: v.to_dict() for k, v in metrics.items()})

    # -- sensors

    def sense(self) -> SensorSnapshot:
        instances = tuple(
            InstanceView(i.instance_id, i.type_name, i.node_name, i.state, i.weight, i.in_flight,
                         dict(i.parameters))
            for _, i in sorted(self.instances.items())
        )
        metrics = {iid: self.last_metrics.get(iid, WindowMetrics()) for iid in sorted(self.instances)}
        return SensorSnapshot(self.clock, tuple(self.types[k] for k in sorted(self.types)),
                              tuple(self.nodes[k] for k in sorted(self.nodes)), instances,
                              tuple(self.connectors), dict(sorted(self.workloads.items())),
                              self.window, self.last_window_end, metrics, self.dropped)

    def write_event_log(self, fp: TextIO, start: int = 0) -> None:
        for ev in self.events[start:]:
            fp.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")

    # -- effectors

    def quiesce(self, instance_id: str) -> None:
        inst = self.instances.get(instance_id)
        if inst is None:
            raise UnknownTarget(instance_id)
        if inst.state == RUNNING:
            inst.state = QUIESCING
            self._emit("InstanceStateChanged", instance_id, state=QUIESCING)

    def resume(self, instance_id: str) -> None:
        inst = self.instances.get(instance_id)
        if inst is not None and inst.state == QUIESCING:
            inst.state = RUNNING
            self._emit("InstanceStateChanged", instance_id, state=RUNNING)

    def is_quiescent(self, instance_id: str) -> bool:
        inst = self.instances[instance_id]
        return inst.state in (QUIESCING, FAILED, STOPPED) and inst.in_flight == 0

    def await_quiescence(self, instance_ids: Sequence[str], timeout: float = 60.0,
                         step: float = 0.05) -> bool:
        """Advance simulated time until every instance has drained."""
        deadline = self.clock + timeout
        while not all(self.is_quiescent(i) for i in instance_ids if i in self.instances):
            if self.clock >= deadline:
                return False
            self.advance_to(min(deadline, self.clock + step))
        return True

    def effect(self, actions: Sequence[ReconfigurationAction]) -> EffectResult:
        """Apply ``actions`` in order, atomically: on any error nothing changes."""
        if not actions:
            return EffectResult((), ())
        saved = self._save()
        first = len(self.events)
        try:
            for a in actions:
                self._apply(a)
            problems = self._invariant_problems()
            if problems:
                raise InvalidAction(problems[0])
        except EffectorError:
            self._restore(saved)
            raise
        return EffectResult(tuple(actions), tuple(self.events[first:]))

    def _save(self):
        return (copy.deepcopy(self.instances), list(self.connectors), len(self.events),
                list(self._queue), self._seq, self.rng.getstate())

    def _restore(self, saved) -> None:
        instances, connectors, n_events, queue, seq, rng_state = saved
        self.instances = instances
        self.connectors = connectors
        del self.events[n_events:]
        self._queue = queue
        self._seq = seq
        self.rng.setstate(rng_state)

    def _check_add(self, type_name: str, node_name: str, instance_id: str) -> None:
        if type_name not in self.types:
            raise UnknownTarget(f"component type {type_name!r}")
        if node_name not in self.nodes:
            raise UnknownTarget(f"node {node_name!r}")
        if instance_id in self.instances:
            raise InvalidAction(f"instance {instance_id!r} already exists")
        hosted = sum(1 for i in self.instances.values() if i.node_name == node_name)
        if hosted + 1 > self.nodes[node_name].capacity:
            raise CapacityExceeded(f"node {node_name!r} cannot host another instance")

    def _check_connector(self, c: Connector) -> None:
        for end in (c.source, c.target):
            if end not in self.instances:
                raise UnknownTarget(f"instance {end!r}")
        src_t = self.types[self.instances[c.source].type_name]
        dst_t = self.types[self.instances[c.target].type_name]
        if c.interface not in src_t.requires or dst_t.provides != c.interface:
            raise InvalidAction(f"connector {c.source}.{c.interface} -> {c.target} does not match types")

    def interface_for(self, source: str, target: str) -> str:
        src_t = self.types[self.instances[source].type_name]
        dst_t = self.types[self.instances[target].type_name]
        if dst_t.provides not in src_t.requires:
            raise InvalidAction(f"{target} provides nothing {source} requires")
        return dst_t.provides

    def _apply(self, a: ReconfigurationAction) -> None:
        if isinstance(a, AddInstance):
            self._check_add(a.type_name, a.node_name, a.instance_id)
            self.instances[a.instance_id] = _Instance(a.instance_id, a.type_name, a.node_name)
            self._emit("InstanceStarted", a.instance_id, typeName=a.type_name, nodeName=a.node_name)
        elif isinstance(a, RemoveInstance):
            inst = self._instance(a.instance_id)
            if inst.state == RUNNING or inst.in_flight:
                raise NotQuiescent(a.instance_id)
            del self.instances[a.instance_id]
            self._emit("InstanceRemoved", a.instance_id)
        elif isinstance(a, Rebind):
            for end in (a.source, a.target):
                self._instance(end)
            iface = a.interface or self.interface_for(a.source, a.target)
            c = Connector(a.source, iface, a.target)
            if a.connect:
                self._check_connector(c)
                if c in self.connectors:
                    raise InvalidAction(f"connector {c} exists")
                self.connectors.append(c)
                self.connectors.sort(key=_connector_key)
                self._emit("ConnectorAdded", a.source, interface=iface, target=a.target)
            else:
                if c not in self.connectors:
                    raise UnknownTarget(f"connector {a.source}.{iface} -> {a.target}")
                self.connectors.remove(c)
                self._emit("ConnectorRemoved", a.source, interface=iface, target=a.target)
        elif isinstance(a, Restart):
            inst = self._instance(a.instance_id)
            if inst.state not in (FAILED, STOPPED):
                raise InvalidAction(f"{a.instance_id} is {inst.state}, cannot restart")
            inst.state = RUNNING
            inst.epoch += 1
            self._emit("InstanceStateChanged", a.instance_id, state=RUNNING)
        elif isinstance(a, SetParameter):
            inst = self._instance(a.instance_id)
            if a.name == "weight":
                if not isinstance(a.value, (int, float)) or a.value <= 0:
                    raise InvalidAction("weight must be positive")
                inst.weight = float(a.value)
            else:
                inst.parameters[a.name] = a.value
            self._emit("ParameterChanged", a.instance_id, name=a.name, value=a.value)
        elif isinstance(a, MigrateInstance):
            inst = self._instance(a.instance_id)
            if inst.state == RUNNING or inst.in_flight:
                raise NotQuiescent(a.instance_id)
            if a.target_node not in self.nodes:
                raise UnknownTarget(f"node {a.target_node!r}")
            hosted = sum(1 for i in self.instances.values() if i.node_name == a.target_node)
            if hosted + 1 > self.nodes[a.target_node].capacity:
                raise CapacityExceeded(f"node {a.target_node!r} cannot host another instance")
            inst.node_name = a.target_node
            inst.state = RUNNING
            self._emit("InstanceMigrated", a.instance_id, nodeName=a.target_node)
            self._emit("InstanceStateChanged", a.instance_id, state=RUNNING)
        else:
            raise InvalidAction(f"unknown action {a!r}")

    def _instance(self, iid: str) -> _Instance:
        inst = self.instances.get(iid)
        if inst is None:
            raise UnknownTarget(f"instance {iid!r}")
        return inst

    def _invariant_problems(self) -> list[str]:
        out = []
        for c in self.connectors:
            if c.source not in self.instances or c.target not in self.instances:
                out.append(f"dangling connector {c.source}.{c.interface} -> {c.target}")
        for iid, inst in sorted(self.instances.items()):
            if inst.node_name not in self.nodes:
                out.append(f"{iid} on unknown node")
            if inst.state != RUNNING:
                continue
            for iface in self.types[inst.type_name].requires:
                if not any(c.source == iid and c.interface == iface for c in self.connectors):
                    out.append(f"{iid}.{iface} is not connected")
        return out


def _connector_key(c: Connector) -> tuple:
    return (c.source, c.interface, c.target)
