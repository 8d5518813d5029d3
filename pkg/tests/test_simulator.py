import io
from statistics import mean

import pytest
from hypothesis import given, settings, strategies as st

from megaloop.simulator import (AddInstance, Blueprint, CapacityExceeded, ComponentType, Connector,
                                InstanceSpec, InvalidAction, MigrateInstance, NodeSpec, NotQuiescent,
                                Rebind, RemoveInstance, Restart, SetParameter, Simulator, UnknownTarget)

from strategies import random_blueprint, random_effect


def single(rate=0.0, service=0.1, speed=1.0, failure_rate=0.0, capacity=50):
    return Blueprint((ComponentType("S", "s", (), service, failure_rate),),
                     (NodeSpec("n1", capacity, speed),), (InstanceSpec("s-1", "S", "n1"),), (),
                     {"S": rate})


def two_tier():
    return Blueprint(
        (ComponentType("Web", "http", ("db",), 0.02), ComponentType("Db", "db", (), 0.05)),
        (NodeSpec("n1", 4, 1.0), NodeSpec("n2", 4, 2.0)),
        (InstanceSpec("web-1", "Web", "n1"), InstanceSpec("db-1", "Db", "n1"), InstanceSpec("db-2", "Db", "n2")),
        (Connector("web-1", "db", "db-1"),),
        {"Web": 5.0})


def windows(sim):
    return [e.data["metrics"] for e in sim.events if e.kind == "WindowClosed"]


def test_zero_load_is_silent():
    sim = Simulator(single(0.0), 1)
    sim.advance(100.0)
    assert {e.kind for e in sim.events} == {"WindowClosed"}
    m = sim.sense().metrics["s-1"]
    assert (m.arrivals, m.utilization, m.avg_response_time) == (0, 0.0, 0.0)
    assert m.conserved()


@pytest.mark.parametrize("speed", [1.0, 2.0])
def test_utilization_tracks_offered_load(speed):
    sim = Simulator(single(4.0, 0.1, speed), 7)
    sim.advance(3000.0)
    util = mean(w["s-1"]["utilization"] for w in windows(sim))
    assert util == pytest.approx(4.0 * 0.1 / speed, rel=0.1)


def test_failure_rate_of_one_thousand_fails_everything():
    sim = Simulator(single(5.0, failure_rate=1000.0), 3)
    sim.advance(50.0)
    kinds = {e.kind for e in sim.events} - {"WindowClosed"}
    assert kinds == {"RequestFailed"}


def test_sense_is_pure():
    sim = Simulator(two_tier(), 11)
    sim.advance(25.0)
    before = (len(sim.events), sim.clock, sim.rng.getstate())
    a, b = sim.sense(), sim.sense()
    assert a == b
    assert (len(sim.events), sim.clock, sim.rng.getstate()) == before


@given(st.randoms(use_true_random=False))
@settings(max_examples=25)
def test_every_window_conserves_requests(rng):
    sim = Simulator(random_blueprint(rng, failure_rate=rng.choice([0.0, 100.0])), rng.randrange(1000))
    for _ in range(3):
        sim.advance(rng.uniform(5.0, 20.0))
        try:
            sim.effect(random_effect(rng, sim))
        except Exception:
            pass
    for w in windows(sim):
        for m in w.values():
            assert m["inFlightStart"] + m["arrivals"] == m["completed"] + m["failed"] + m["inFlightEnd"]


def test_node_capacity_limits_in_flight_requests():
    sim = Simulator(single(200.0, 1.0, capacity=3), 5)
    sim.advance(5.0)
    assert sim.sense().instances[0].in_flight <= 3
    assert any(e.kind == "RequestFailed" and e.data["reason"] == "capacity" for e in sim.events)


def test_remove_requires_quiescence():
    sim = Simulator(two_tier(), 2)
    with pytest.raises(NotQuiescent):
        sim.effect([RemoveInstance("db-2")])
    sim.quiesce("db-2")
    assert sim.await_quiescence(["db-2"], timeout=10.0)
    sim.effect([RemoveInstance("db-2")])
    assert "db-2" not in sim.instances


def test_remove_with_in_flight_requests_is_refused():
    sim = Simulator(single(200.0, 5.0), 9)
    sim.advance(1.0)
    assert sim.instances["s-1"].in_flight > 0
    sim.quiesce("s-1")
    with pytest.raises(NotQuiescent):
        sim.effect([RemoveInstance("s-1")])


def test_effect_batches_are_atomic():
    sim = Simulator(two_tier(), 4)
    sim.advance(10.0)
    before = (sim.sense(), len(sim.events))
    with pytest.raises(UnknownTarget):
        sim.effect([AddInstance("Db", "n2", "db-3"), Rebind("web-1", "db-3"), Restart("ghost")])
    assert (sim.sense(), len(sim.events)) == before


def test_batch_invariants_are_checked_at_the_end():
    sim = Simulator(two_tier(), 4)
    # web-1 is briefly unwired in the middle of the batch
    sim.effect([Rebind("web-1", "db-1", False), Rebind("web-1", "db-2", True)])
    assert [c.target for c in sim.connectors] == ["db-2"]
    with pytest.raises(InvalidAction):
        sim.effect([Rebind("web-1", "db-2", False)])


def test_effector_errors():
    sim = Simulator(two_tier(), 4)
    with pytest.raises(CapacityExceeded):
        sim.effect([AddInstance("Db", "n1", f"db-{k}") for k in range(3, 6)])
    with pytest.raises(InvalidAction):
        sim.effect([Restart("db-1")])
    with pytest.raises(InvalidAction):
        sim.effect([SetParameter("db-1", "weight", 0)])
    with pytest.raises(InvalidAction):
        sim.effect([Rebind("db-1", "web-1")])
    with pytest.raises(NotQuiescent):
        sim.effect([MigrateInstance("db-1", "n2")])


def test_migrate_and_restart():
    sim = Simulator(two_tier(), 6)
    sim.schedule(3.0, "InjectFailure", instanceId="db-2")
    sim.advance(5.0)
    assert sim.instances["db-2"].state == "failed"
    sim.effect([Restart("db-2")])
    sim.quiesce("db-1")
    assert sim.await_quiescence(["db-1"])
    sim.effect([MigrateInstance("db-1", "n2")])
    assert (sim.instances["db-1"].node_name, sim.instances["db-1"].state) == ("n2", "running")


def test_load_change_takes_effect():
    sim = Simulator(single(0.0), 1)
    sim.schedule(10.0, "LoadChanged", entryType="S", rate=20.0)
    sim.advance(30.0)
    arrivals = [e.time for e in sim.events if e.kind == "RequestCompleted"]
    assert arrivals and min(arrivals) > 10.0


def run_log(seed):
    sim = Simulator(two_tier(), seed)
    sim.schedule(12.0, "InjectFailure", instanceId="db-1")
    sim.advance(30.0)
    sim.effect([Rebind("web-1", "db-2")])
    sim.advance(30.0)
    out = io.StringIO()
    sim.write_event_log(out)
    return out.getvalue()


def test_same_seed_same_log():
    assert run_log(5) == run_log(5)
    assert run_log(5) != run_log(6)


def test_blueprint_round_trip():
    bp = two_tier()
    assert Blueprint.from_dict(bp.to_dict()) == bp
