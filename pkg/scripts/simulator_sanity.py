"""Single-server utilization against offered load, averaged over seeds.

    python scripts/simulator_sanity.py [--seeds 5] [--horizon 100]
"""
from __future__ import annotations

import argparse
from statistics import mean

from megaloop.simulator import Blueprint, ComponentType, InstanceSpec, NodeSpec, Simulator


def utilization(rate: float, service: float, seed: int, horizon: float) -> tuple[float, bool]:
    bp = Blueprint((ComponentType("S", "s", (), service),), (NodeSpec("n1", 50, 1.0),),
                   (InstanceSpec("s-1", "S", "n1"),), (), {"S": rate})
    sim = Simulator(bp, seed)
    sim.advance(horizon)
    ms = [e.data["metrics"]["s-1"] for e in sim.events if e.kind == "WindowClosed"]
    conserved = all(m["inFlightStart"] + m["arrivals"] == m["completed"] + m["failed"] + m["inFlightEnd"]
                    for m in ms)
    return mean(m["utilization"] for m in ms), conserved


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--horizon", type=float, default=100.0)
    ap.add_argument("--service", type=float, default=0.1)
    args = ap.parse_args()
    print(f"{'rho':>5} {'measured':>9} {'rel.err':>8}  conserved")
    for rho in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
        runs = [utilization(rho / args.service, args.service, s, args.horizon) for s in range(1, args.seeds + 1)]
        u = mean(r[0] for r in runs)
        print(f"{rho:5.2f} {u:9.4f} {u / rho - 1:+8.3f}  {all(r[1] for r in runs)}")


if __name__ == "__main__":
    main()
