"""Scenario bundles: a directory with ``scenario.json`` and the files it names."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .adaptation import AdaptationError, ChangeModel, EvaluationModel
from .model import Metamodel, ModelError
from .simulator import Blueprint, EffectorError, Simulator
from .sync import SyncError, ViewSpec, load_view_spec, standard_metamodels

VIEW_KINDS = ("architecture", "performance", "failure", "environment")
SCENARIO_FILE = "scenario.json"


class ScenarioError(Exception):
    pass


class ParseError(ScenarioError):
    def __init__(self, file: str, message: str):
        super().__init__(f"{file}: {message}")
        self.file = file


@dataclass(frozen=True)
class Problem:
    file: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.file}: {self.field}: {self.message}"


class ValidationError(ScenarioError):
    def __init__(self, problems: list[Problem]):
        super().__init__("; ".join(str(p) for p in problems))
        self.problems = problems


@dataclass(frozen=True)
class Offer:
    name: str
    evaluation: EvaluationModel | None = None
    change: ChangeModel | None = None


@dataclass(frozen=True)
class ManagerDecl:
    manager_id: str
    role: str                     # concern | coordinator | supervisor
    evaluation: EvaluationModel | None = None
    change: ChangeModel | None = None
    supervises: str | None = None
    offers: tuple[Offer, ...] = ()


@dataclass(frozen=True)
class TimelineEvent:
    time: float
    kind: str
    data: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    path: Path
    name: str
    seed: int
    run_length: float
    period: float
    blueprint: Blueprint
    view_specs: Mapping[str, ViewSpec]
    metamodels: Mapping[str, Metamodel]
    managers: tuple[ManagerDecl, ...]
    timeline: tuple[TimelineEvent, ...]

    def manager(self, manager_id: str) -> ManagerDecl:
        for m in self.managers:
            if m.manager_id == manager_id:
                return m
        raise KeyError(manager_id)

    def concerns(self) -> list[ManagerDecl]:
        return [m for m in self.managers if m.role == "concern"]

    def coordinator(self) -> ManagerDecl | None:
        return next((m for m in self.managers if m.role == "coordinator"), None)

    def supervisors_of(self, manager_id: str) -> list[ManagerDecl]:
        return [m for m in self.managers if m.role == "supervisor" and m.supervises == manager_id]


def _schema(name: str) -> dict:
    return json.loads((resources.files("megaloop") / "schemas" / f"{name}.schema.json").read_text())


class _Loader:
    def __init__(self, root: Path):
        self.root = root
        self.problems: list[Problem] = []

    def json(self, rel: str, schema: str | None = None) -> Any:
        p = self.root / rel
        try:
            data = json.loads(p.read_text())
        except FileNotFoundError:
            self.problems.append(Problem(rel, "-", "referenced file does not exist"))
            return None
        except json.JSONDecodeError as exc:
            raise ParseError(rel, f"line {exc.lineno}: {exc.msg}") from None
        if schema is not None:
            validator = jsonschema.Draft202012Validator(_schema(schema))
            errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.path)))
            for e in errors:
                self.problems.append(Problem(rel, "/".join(map(str, e.path)) or "-", e.message))
            if errors:
                return None
        return data

    def evaluation(self, rel: str) -> EvaluationModel | None:
        d = self.json(rel, "evaluation")
        if d is None:
            return None
        em = EvaluationModel.from_dict(d)
        try:
            em.validate()
        except AdaptationError as exc:
            self.problems.append(Problem(rel, "-", str(exc)))
        return em

    def change(self, rel: str) -> ChangeModel | None:
        d = self.json(rel, "change")
        if d is None:
            return None
        cm = ChangeModel.from_dict(d)
        try:
            cm.validate()
        except AdaptationError as exc:
            self.problems.append(Problem(rel, "-", str(exc)))
        return cm


def load_scenario(path: str | Path) -> Scenario:
    """Load and fully validate a scenario bundle.

    Raises :class:`ParseError` for unreadable JSON and :class:`ValidationError`
    listing every problem found (file and field) otherwise.
    """
    root = Path(path)
    if root.is_file():
        root = root.parent
    if not (root / SCENARIO_FILE).is_file():
        raise ParseError(str(root / SCENARIO_FILE), "scenario file not found")
    ld = _Loader(root)
    doc = ld.json(SCENARIO_FILE, "scenario")
    if doc is None:
        raise ValidationError(ld.problems)
    P = ld.problems.append

    bp_doc = ld.json(doc["blueprint"], "blueprint")
    blueprint = None
    if bp_doc is not None:
        try:
            blueprint = Blueprint.from_dict(bp_doc)
            Simulator(blueprint, doc["seed"])
        except (EffectorError, KeyError, ValueError) as exc:
            P(Problem(doc["blueprint"], "-", f"invalid blueprint: {exc}"))

    metamodels = dict(standard_metamodels())
    for rel in doc.get("metamodels", []):
        d = ld.json(rel)
        if d is not None:
            try:
                mm = Metamodel.from_dict(d)
                metamodels[mm.name] = mm
            except (ModelError, KeyError) as exc:
                P(Problem(rel, "-", f"invalid metamodel: {exc}"))

    specs: dict[str, ViewSpec] = {}
    for kind, source in sorted(doc.get("views", {k: "builtin" for k in VIEW_KINDS}).items()):
        try:
            if source == "builtin":
                specs[kind] = load_view_spec(kind)
            else:
                d = ld.json(source)
                if d is None:
                    continue
                specs[kind] = ViewSpec.from_dict(d)
        except (SyncError, KeyError, FileNotFoundError) as exc:
            P(Problem(SCENARIO_FILE, f"views/{kind}", str(exc)))
            continue
        if specs[kind].view_kind != kind:
            P(Problem(SCENARIO_FILE, f"views/{kind}", f"spec describes {specs[kind].view_kind!r}"))
        if specs[kind].metamodel not in metamodels:
            P(Problem(SCENARIO_FILE, f"views/{kind}", f"unknown metamodel {specs[kind].metamodel!r}"))
    if "architecture" not in specs:
        P(Problem(SCENARIO_FILE, "views", "an architecture view is required"))

    managers = []
    ids = set()
    for i, m in enumerate(doc["managers"]):
        where = f"managers/{i}"
        mid, role = m["managerId"], m["role"]
        if mid in ids:
            P(Problem(SCENARIO_FILE, where, f"duplicate manager id {mid!r}"))
        ids.add(mid)
        em = ld.evaluation(m["evaluationModel"]) if "evaluationModel" in m else None
        cm = ld.change(m["changeModel"]) if "changeModel" in m else None
        offers = tuple(Offer(o["name"], ld.evaluation(o["evaluationModel"]) if "evaluationModel" in o else None,
                             ld.change(o["changeModel"]) if "changeModel" in o else None)
                       for o in m.get("offers", []))
        if role == "concern":
            if "evaluationModel" not in m or "changeModel" not in m:
                P(Problem(SCENARIO_FILE, where, "concern managers need an evaluation and a change model"))
            elif cm is not None and (cm.view not in specs or cm.view == "environment"):
                P(Problem(m["changeModel"], "view", f"cannot plan on view {cm.view!r}"))
        elif role == "coordinator":
            if "evaluationModel" not in m:
                P(Problem(SCENARIO_FILE, where, "the coordinator needs a constraint (evaluation) model"))
        elif role == "supervisor":
            if not m.get("supervises"):
                P(Problem(SCENARIO_FILE, where, "supervisors must name the manager they supervise"))
        for model, rel in ((em, m.get("evaluationModel")),
                           *((o.evaluation, f"{where}/offers/{o.name}") for o in offers)):
            for c in (model.constraints if model else ()):
                if c.view not in specs:
                    P(Problem(rel, f"constraints/{c.constraint_id}", f"unknown view {c.view!r}"))
        managers.append(ManagerDecl(mid, role, em, cm, m.get("supervises"), offers))
    roles = [m.role for m in managers]
    if roles.count("coordinator") > 1:
        P(Problem(SCENARIO_FILE, "managers", "at most one coordinator"))
    if "concern" not in roles:
        P(Problem(SCENARIO_FILE, "managers", "at least one concern manager is required"))
    concern_ids = {m.manager_id for m in managers if m.role == "concern"}
    for i, m in enumerate(managers):
        if m.role == "supervisor" and m.supervises and m.supervises not in concern_ids:
            P(Problem(SCENARIO_FILE, f"managers/{i}/supervises", f"no concern manager {m.supervises!r}"))
    supervised = [m.supervises for m in managers if m.role == "supervisor"]
    if len(set(supervised)) != len(supervised):
        P(Problem(SCENARIO_FILE, "managers", "one supervisor per concern manager"))

    run_length = float(doc["runLength"])
    timeline = []
    type_names = {t.name for t in blueprint.types} if blueprint else set()
    for i, ev in enumerate(doc.get("timeline", [])):
        where = f"timeline/{i}"
        if ev["time"] > run_length:
            P(Problem(SCENARIO_FILE, f"{where}/time", f"{ev['time']} is after runLength {run_length}"))
        data = {k: v for k, v in ev.items() if k not in ("time", "kind")}
        if ev["kind"] == "LoadChanged" and blueprint and ev["entryType"] not in type_names:
            P(Problem(SCENARIO_FILE, f"{where}/entryType", f"unknown component type {ev['entryType']!r}"))
        if ev["kind"] == "InstallGoal":
            if ev["manager"] not in concern_ids:
                P(Problem(SCENARIO_FILE, f"{where}/manager", f"no concern manager {ev['manager']!r}"))
            data["evaluation"] = ld.evaluation(ev["evaluationModel"])
        timeline.append(TimelineEvent(float(ev["time"]), ev["kind"], data))

    if ld.problems:
        raise ValidationError(ld.problems)
    return Scenario(root, doc["name"], int(doc["seed"]), run_length, float(doc.get("period", 10.0)),
                    blueprint, specs, metamodels, tuple(managers),
                    tuple(sorted(timeline, key=lambda e: e.time)))
