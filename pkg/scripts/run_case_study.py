"""Run the shipped case study and print its adaptation story from the trace.

    python scripts/run_case_study.py [--seed N] [--out DIR]
"""
from __future__ import annotations

import argparse
from pathlib import Path

from megaloop.runner import run
from megaloop.scenario import load_scenario

ROOT = Path(__file__).resolve().parents[1]
STORY = ("analysis", "proposal", "propagation", "report", "rollback", "infeasible",
         "escalation", "effect", "closure")


def describe(r: dict) -> str:
    kind = r["kind"]
    if kind == "analysis":
        crit = sorted({v["constraintId"] for v in r["violations"] if v["severity"] == "critical"})
        return f"{r['manager']}: {r['verdict']} utility={r['utility']:.3f} critical={crit}"
    if kind == "proposal":
        return f"{r['proposalId']} by {r['manager']}: {r['chosen']}"
    if kind == "report":
        cited = sorted({v["constraintId"] for v in r["evidence"]})
        return f"{r['proposalId']}: {r['verdict']} -> {r['decision']} {cited}"
    if kind == "rollback":
        return f"{r['proposalId']}: restored={r['restored']} vetoed={r['vetoed']}"
    if kind == "escalation":
        return f"{r['by']} installs {r['replacement']} for {r['manager']}"
    if kind == "effect":
        return ", ".join(a["action"] for a in r["actions"]) or "no actions"
    if kind == "closure":
        return f"closed={r['closed']}"
    return r.get("target") or r.get("reason") or ""


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    result = run(load_scenario(ROOT / "scenarios" / "case_study"), seed=args.seed, out=args.out)
    for r in result.trace.records:
        if r.get("kind") not in STORY:
            continue
        # only adapting analyses are interesting here
        if r["kind"] == "analysis" and r["verdict"] != "adaptationRequired":
            continue
        print(f"t={r['t']:6.1f}  {r['kind']:<12} {describe(r)}")
    print(f"status {result.status}, {len(result.trace.records)} trace records")


if __name__ == "__main__":
    main()
