"""Adaptation models (evaluation and change models), analysis and planning.

Evaluation and change models are themselves typed models so that they can
live in megamodel nodes and be swapped by a higher-level manager; the
dataclasses here are their working form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .expr import ElementRef, ExpressionError, evaluate
from .model import Metamodel, ModelDelta, TypedModel, conforms, diff

CRITICAL, WARNING = "critical", "warning"
CONCERNS = ("performance", "failure", "architecture")
CONVERGENCE = "convergence"
SATURATED_RESPONSE = 1.0e6


class AdaptationError(Exception):
    pass


class Infeasible(AdaptationError):
    """No admissible target configuration: the escalation trigger."""

    def __init__(self, message: str, candidates: Sequence["Candidate"] = ()):
        super().__init__(message)
        self.candidates = tuple(candidates)


# --------------------------------------------------------------------------
# evaluation models


@dataclass(frozen=True)
class Constraint:
    constraint_id: str
    view: str
    predicate: str
    scope_type: str | None = None
    severity: str = CRITICAL


@dataclass(frozen=True)
class EvaluationModel:
    constraints: tuple[Constraint, ...] = ()
    weights: Mapping[str, float] = field(default_factory=dict)
    thresholds: Mapping[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        ids = [c.constraint_id for c in self.constraints]
        if len(set(ids)) != len(ids):
            raise AdaptationError("constraint ids must be unique")
        for c in self.constraints:
            if c.severity not in (CRITICAL, WARNING):
                raise AdaptationError(f"{c.constraint_id}: bad severity {c.severity!r}")
        for k, w in self.weights.items():
            if k not in CONCERNS:
                raise AdaptationError(f"unknown concern {k!r}")
            if not 0.0 <= w <= 1.0:
                raise AdaptationError(f"weight of {k} outside [0, 1]")
        if self.weights and abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise AdaptationError("utility weights must sum to 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvaluationModel":
        em = cls(
            tuple(Constraint(c["constraintId"], c["view"], c["predicate"], c.get("scopeType"),
                             c.get("severity", CRITICAL)) for c in d.get("constraints", [])),
            {k: float(v) for k, v in d.get("utilityWeights", {}).items()},
            {k: float(v) for k, v in d.get("thresholds", {}).items()},
        )
        return em

    def to_dict(self) -> dict:
        return {
            "constraints": [{"constraintId": c.constraint_id, "view": c.view, "predicate": c.predicate,
                             **({"scopeType": c.scope_type} if c.scope_type else {}),
                             "severity": c.severity} for c in self.constraints],
            "utilityWeights": dict(sorted(self.weights.items())),
            "thresholds": dict(sorted(self.thresholds.items())),
        }

    def to_model(self) -> TypedModel:
        ed = TypedModel("EvaluationModel").edit()
        for c in self.constraints:
            ed.add("constraint:" + c.constraint_id, "Constraint",
                   {"constraintId": c.constraint_id, "view": c.view, "scopeType": c.scope_type,
                    "predicate": c.predicate, "severity": c.severity})
        for k, w in sorted(self.weights.items()):
            ed.add("weight:" + k, "Weight", {"concern": k, "weight": float(w)})
        for k, v in sorted(self.thresholds.items()):
            ed.add("threshold:" + k, "Threshold", {"name": k, "value": float(v)})
        return ed.freeze()

    @classmethod
    def from_model(cls, m: TypedModel) -> "EvaluationModel":
        return cls(
            tuple(Constraint(e["constraintId"], e["view"], e["predicate"], e.get("scopeType"), e["severity"])
                  for e in (x.attrs for x in m.of_type("Constraint"))),
            {e.attrs["concern"]: e.attrs["weight"] for e in m.of_type("Weight")},
            {e.attrs["name"]: e.attrs["value"] for e in m.of_type("Threshold")},
        )


# --------------------------------------------------------------------------
# change models


@dataclass(frozen=True)
class Edit:
    op: str                      # clone | set | remove
    name: str | None = None
    value: str | None = None     # expression


@dataclass(frozen=True)
class EcaRule:
    rule_id: str
    event: str
    condition: str = "True"
    edits: tuple[Edit, ...] = ()


@dataclass(frozen=True)
class PatternEntry:
    type_name: str
    count: int
    placement: tuple[str, ...] = ()


@dataclass(frozen=True)
class Variant:
    variant_id: str
    entries: tuple[PatternEntry, ...]


@dataclass(frozen=True)
class ChangeModel:
    mode: str
    view: str
    rules: tuple[EcaRule, ...] = ()
    variants: tuple[Variant, ...] = ()

    def validate(self) -> None:
        if self.mode not in ("implicit", "explicit"):
            raise AdaptationError(f"bad change model mode {self.mode!r}")
        ids = [r.rule_id for r in self.rules] + [v.variant_id for v in self.variants]
        if len(set(ids)) != len(ids):
            raise AdaptationError("rule and variant ids must be unique")
        if self.mode == "implicit" and self.variants or self.mode == "explicit" and self.rules:
            raise AdaptationError(f"{self.mode} change models hold only "
                                  f"{'rules' if self.mode == 'implicit' else 'variants'}")
        for r in self.rules:
            for e in r.edits:
                if e.op not in ("clone", "set", "remove"):
                    raise AdaptationError(f"{r.rule_id}: unknown edit op {e.op!r}")
        for v in self.variants:
            for p in v.entries:
                if p.count < 0 or (p.placement and len(p.placement) != p.count):
                    raise AdaptationError(f"{v.variant_id}: placement must list one node per instance")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChangeModel":
        return cls(
            d["mode"], d.get("view", "performance"),
            tuple(EcaRule(r["ruleId"], r["event"], r.get("condition", "True"),
                          tuple(Edit(e["op"], e.get("name"), e.get("value")) for e in r["action"]))
                  for r in d.get("rules", [])),
            tuple(Variant(v["variantId"],
                          tuple(PatternEntry(p["typeName"], int(p["count"]), tuple(p.get("placement", ())))
                                for p in v["pattern"]))
                  for v in d.get("variants", [])),
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "view": self.view,
            "rules": [{"ruleId": r.rule_id, "event": r.event, "condition": r.condition,
                       "action": [{k: v for k, v in (("op", e.op), ("name", e.name), ("value", e.value))
                                   if v is not None} for e in r.edits]} for r in self.rules],
            "variants": [{"variantId": v.variant_id,
                          "pattern": [{"typeName": p.type_name, "count": p.count,
                                       **({"placement": list(p.placement)} if p.placement else {})}
                                      for p in v.entries]} for v in self.variants],
        }

    def to_model(self) -> TypedModel:
        ed = TypedModel("ChangeModel").edit()
        ed.add("changeModel", "ChangeModel", {"mode": self.mode, "view": self.view})
        for r in self.rules:
            rid = "rule:" + r.rule_id
            ed.add(rid, "Rule", {"ruleId": r.rule_id, "event": r.event, "condition": r.condition})
            for i, e in enumerate(r.edits):
                ed.add(f"{rid}/edit:{i}", "Edit", {"op": e.op, "name": e.name, "value": e.value})
                ed.link(rid, "edits", f"{rid}/edit:{i}")
            ed.link("changeModel", "rules", rid)
        for v in self.variants:
            vid = "variant:" + v.variant_id
            ed.add(vid, "Variant", {"variantId": v.variant_id})
            for i, p in enumerate(v.entries):
                ed.add(f"{vid}/entry:{i}", "PatternEntry",
                       {"typeName": p.type_name, "count": p.count,
                        "placement": ",".join(p.placement) or None})
                ed.link(vid, "entries", f"{vid}/entry:{i}")
            ed.link("changeModel", "variants", vid)
        return ed.freeze()

    @classmethod
    def from_model(cls, m: TypedModel) -> "ChangeModel":
        root = m["changeModel"]
        rules = []
        for rid in root.targets("rules"):
            r = m[rid]
            edits = tuple(Edit(m[x]["op"], m[x].get("name"), m[x].get("value")) for x in r.targets("edits"))
            rules.append(EcaRule(r["ruleId"], r["event"], r["condition"], edits))
        variants = []
        for vid in root.targets("variants"):
            v = m[vid]
            entries = tuple(PatternEntry(m[x]["typeName"], m[x]["count"],
                                         tuple(p for p in (m[x].get("placement") or "").split(",") if p))
                            for x in v.targets("entries"))
            variants.append(Variant(v["variantId"], entries))
        return cls(root["mode"], root["view"], tuple(rules), tuple(variants))


# --------------------------------------------------------------------------
# analysis


@dataclass(frozen=True)
class ViolationRecord:
    constraint_id: str
    element_id: str | None
    severity: str
    view: str
    error: str | None = None

    def to_dict(self) -> dict:
        return {"constraintId": self.constraint_id, "elementId": self.element_id,
                "severity": self.severity, "view": self.view, "error": self.error}


@dataclass(frozen=True)
class AnalysisModel:
    subject: Mapping[str, int]
    violations: tuple[ViolationRecord, ...]
    utility: float
    scores: Mapping[str, float]
    verdict: str

    @property
    def adaptation_required(self) -> bool:
        return self.verdict == "adaptationRequired"

    def critical(self) -> list[ViolationRecord]:
        return [v for v in self.violations if v.severity == CRITICAL]

    def to_dict(self) -> dict:
        return {"subject": dict(self.subject), "violations": [v.to_dict() for v in self.violations],
                "utility": self.utility, "scores": dict(self.scores), "verdict": self.verdict}


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def response_time(perf: TypedModel) -> float:
    """Arrival-weighted mean response time over the components of a performance view."""
    total = weighted = 0.0
    for e in perf.of_type("Component"):
        rate = e.get("arrivalRate") or 0.0
        total += rate
        weighted += rate * (e.get("avgResponseTime") or 0.0)
    return weighted / total if total > 0 else 0.0


def performance_score(avg_response_time: float, max_avg_response_time: float) -> float:
    return _clamp(1.0 - avg_response_time / (2.0 * max_avg_response_time))


def failure_score(failures: float, budget: float) -> float:
    return _clamp(1.0 - failures / budget)


def scores_for(views: Mapping[str, TypedModel], em: EvaluationModel, critical: bool) -> dict[str, float]:
    out = {}
    perf = views.get("performance")
    limit = em.thresholds.get("maxAvgResponseTime")
    out["performance"] = (performance_score(response_time(perf), limit)
                          if perf is not None and limit else 1.0)
    fail = views.get("failure")
    budget = em.thresholds.get("failureBudget")
    if fail is not None and budget:
        out["failure"] = failure_score(sum(e.get("failures") or 0 for e in fail.of_type("Component")), budget)
    else:
        out["failure"] = 1.0
    out["architecture"] = 0.0 if critical else 1.0
    return out


def utility_of(scores: Mapping[str, float], weights: Mapping[str, float]) -> float:
    return sum(w * scores.get(c, 1.0) for c, w in sorted(weights.items()))


def _scope_names(views: Mapping[str, TypedModel], mms: Mapping[str, Metamodel] | None,
                 em: EvaluationModel, view: TypedModel) -> dict[str, Any]:
    mm = mms.get(view.metamodel) if mms else None
    names: dict[str, Any] = dict(em.thresholds)

    def elements(type_name: str | None = None) -> list[ElementRef]:
        return [ElementRef(view, e, mm) for e in view if type_name in (None, e.type)]

    def environment(type_name: str | None = None) -> list[ElementRef]:
        env = views.get("environment")
        if env is None:
            return []
        emm = mms.get(env.metamodel) if mms else None
        return [ElementRef(env, e, emm) for e in env if type_name in (None, e.type)]

    names["elements"] = elements
    names["environment"] = environment
    return names


def evaluate_constraints(views: Mapping[str, TypedModel], em: EvaluationModel,
                         mms: Mapping[str, Metamodel] | None = None) -> list[ViolationRecord]:
    out = []
    for c in em.constraints:
        view = views.get(c.view)
        if view is None:
            out.append(ViolationRecord(c.constraint_id, None, c.severity, c.view, "view not available"))
            continue
        base = _scope_names(views, mms, em, view)
        if c.scope_type is None:
            targets = [None]
        else:
            targets = view.of_type(c.scope_type)
        mm = mms.get(view.metamodel) if mms else None
        et = mm.type(c.scope_type) if mm is not None and c.scope_type else None
        for e in targets:
            names = dict(base)
            if e is not None:
                if et is not None:
                    names.update({a.name: None for a in et.attributes})
                names.update(e.attrs)
                names["self"] = ElementRef(view, e, mm)
            try:
                ok = evaluate(c.predicate, names)
            except ExpressionError as exc:
                out.append(ViolationRecord(c.constraint_id, e.id if e else None, c.severity, c.view, str(exc)))
                continue
            if not ok:
                out.append(ViolationRecord(c.constraint_id, e.id if e else None, c.severity, c.view))
    return out


def analyze(views: Mapping[str, TypedModel], em: EvaluationModel, *,
            reference: TypedModel | None = None, reference_view: str | None = None,
            structural: Callable[[TypedModel], TypedModel] | None = None,
            mms: Mapping[str, Metamodel] | None = None) -> AnalysisModel:
    """Apply an evaluation model to descriptive views (read-only).

    With a prescriptive ``reference`` model, every element whose structural
    features diverge from it is reported against the built-in
    ``convergence`` constraint (warning severity).
    """
    violations = evaluate_constraints(views, em, mms)
    if reference is not None and reference_view in views:
        strip = structural or (lambda m: m)
        d = diff(strip(views[reference_view]), strip(reference))
        for eid in sorted(d.touched()):
            violations.append(ViolationRecord(CONVERGENCE, eid, WARNING, reference_view))
    critical = any(v.severity == CRITICAL for v in violations)
    scores = scores_for(views, em, critical)
    utility = utility_of(scores, em.weights) if em.weights else 1.0
    floor = em.thresholds.get("utilityFloor", 0.0)
    verdict = "adaptationRequired" if critical or utility < floor else "ok"
    subject = {k: v.version for k, v in sorted(views.items())}
    return AnalysisModel(subject, tuple(violations), utility, scores, verdict)


# --------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class Candidate:
    candidate_id: str
    model: TypedModel | None
    utility: float | None
    admissible: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {"id": self.candidate_id, "utility": self.utility, "admissible": self.admissible,
                "reason": self.reason}


@dataclass(frozen=True)
class PlanResult:
    chosen: str
    prescriptive: TypedModel
    delta: ModelDelta
    predicted_utility: float
    candidates: tuple[Candidate, ...]


def fresh_id(type_name: str, taken) -> str:
    k = 1
    while f"{type_name.lower()}-{k}" in taken:
        k += 1
    return f"{type_name.lower()}-{k}"


def canonical_links(model: TypedModel) -> TypedModel:
    ed = model.edit()
    for e in model:
        for ref, ts in e.links.items():
            if list(ts) != sorted(ts):
                ed.set_links(e.id, ref, sorted(ts))
    return ed.freeze()


def _clone(ed, src_id: str, taken: set[str], node: str | None) -> str:
    src = ed[src_id]
    new_id = fresh_id(src.attrs.get("typeName", src.type), taken)
    taken.add(new_id)
    attrs = dict(src.attrs)
    if node is not None:
        attrs["node"] = node
    if "state" in attrs:
        attrs["state"] = "running"
    ed.add(new_id, src.type, attrs, {k: list(v) for k, v in src.links.items()})
    for eid in ed.ids():
        e = ed[eid]
        for ref, ts in e.links.items():
            if src_id in ts and eid != new_id:
                ed.set_links(eid, ref, sorted([*ts, new_id]))
    return new_id


def apply_rule(view: TypedModel, rule: EcaRule, bindings: Sequence[str | None], names: Mapping[str, Any],
               mm: Metamodel | None = None, taken: set[str] | None = None) -> TypedModel:
    ed = view.edit()
    taken = set(view.elements) | set(taken or ())
    for bound in bindings:
        for e in rule.edits:
            if bound is None or bound not in ed:
                raise AdaptationError(f"{rule.rule_id}: edit {e.op} needs a bound element")
            scope = dict(names)
            cur = ed.freeze()
            scope.update(cur[bound].attrs)
            scope["self"] = ElementRef(cur, cur[bound], mm)
            if e.op == "clone":
                node = evaluate(e.value, scope) if e.value else None
                _clone(ed, bound, taken, node)
            elif e.op == "set":
                ed.set(bound, e.name, evaluate(e.value, scope))
            elif e.op == "remove":
                ed.remove(bound)
    return canonical_links(ed.freeze())


def instantiate_variant(view: TypedModel, variant: Variant, taken: set[str] | None = None) -> TypedModel:
    """Target configuration of a variant: instance counts and placements per component type."""
    ed = view.edit()
    taken = set(view.elements) | set(taken or ())
    for p in variant.entries:
        current = sorted(e.id for e in view.of_type("Component") if e.attrs.get("typeName") == p.type_name)
        if not current and p.count:
            raise AdaptationError(f"{variant.variant_id}: no {p.type_name} instance to replicate")
        members = list(current[:p.count])
        while len(members) < p.count:
            members.append(_clone(ed, current[0], taken, None))
        for extra in current[p.count:]:
            ed.remove(extra)
        for iid, node in zip(members, p.placement):
            ed.set(iid, "node", node)
    return canonical_links(ed.freeze())


def predict_performance(candidate: TypedModel, current: TypedModel,
                        env: TypedModel | None) -> TypedModel:
    """Fill predicted metrics into a performance-view candidate.

    Component types whose instance set or placement changed get M/M/1
    estimates: the type's observed arrival rate split evenly over its
    running instances, service time scaled by node speed.
    """
    def shape(model, t):
        return sorted((e.id, e.get("node"), e.get("state")) for e in model.of_type("Component")
                      if e.get("typeName") == t)

    speeds = {e.get("name"): e.get("speed") or 1.0 for e in env.of_type("Node")} if env is not None else {}
    service = {e.get("name"): e.get("serviceTimeMean") for e in candidate.of_type("ComponentType")}
    types = sorted({e.get("typeName") for e in candidate.of_type("Component")}
                   | {e.get("typeName") for e in current.of_type("Component")})
    ed = candidate.edit()
    for t in types:
        if shape(candidate, t) == shape(current, t):
            continue
        total = sum(e.get("arrivalRate") or 0.0 for e in current.of_type("Component") if e.get("typeName") == t)
        members = [e for e in candidate.of_type("Component") if e.get("typeName") == t]
        running = [e for e in members if e.get("state") == "running"]
        s = service.get(t)
        for e in members:
            if e not in running or s is None:
                for name in ("arrivalRate", "utilization", "avgResponseTime"):
                    ed.set(e.id, name, 0.0)
                continue
            rate = total / len(running)
            eff = s / speeds.get(e.get("node"), 1.0)
            rho = rate * eff
            ed.set(e.id, "arrivalRate", rate)
            ed.set(e.id, "utilization", min(rho, 1.0))
            ed.set(e.id, "avgResponseTime", eff / (1.0 - rho) if rho < 1.0 else SATURATED_RESPONSE)
    return ed.freeze()


def enabled_bindings(rule: EcaRule, analysis: AnalysisModel, view: TypedModel, names: Mapping[str, Any],
                     mm: Metamodel | None = None) -> list[str | None]:
    out: list[str | None] = []
    for v in analysis.violations:
        if rule.event not in (v.constraint_id, "*") or (rule.event == "*" and v.severity != CRITICAL):
            continue
        if v.element_id is not None and v.element_id not in view:
            continue
        if v.element_id in out:
            continue
        scope = dict(names)
        if v.element_id is not None:
            scope.update(view[v.element_id].attrs)
            scope["self"] = ElementRef(view, view[v.element_id], mm)
        else:
            scope["self"] = None
        try:
            ok = evaluate(rule.condition, scope)
        except ExpressionError:
            ok = False
        if ok:
            out.append(v.element_id)
    return out


UTILITY_TIE_TOL = 1e-9


def plan(analysis: AnalysisModel, views: Mapping[str, TypedModel], cm: ChangeModel, em: EvaluationModel, *,
         mms: Mapping[str, Metamodel] | None = None, vetoed: Sequence[str] = (),
         taken: set[str] | None = None,
         predictor: Callable[[TypedModel, TypedModel, TypedModel | None], TypedModel] | None = None
         ) -> PlanResult:
    """Pick the admissible candidate with the highest predicted utility.

    Raises :class:`Infeasible` when no candidate survives (no enabled rule
    or variant, every candidate violates a critical constraint, or every
    candidate was vetoed before).
    """
    if not analysis.adaptation_required:
        raise AdaptationError("plan called although no adaptation is required")
    kind = cm.view
    current = views[kind]
    mm = mms.get(current.metamodel) if mms else None
    if predictor is None and kind == "performance":
        predictor = predict_performance
    names = _scope_names(views, mms, em, current)
    raw: list[tuple[str, Callable[[], TypedModel]]] = []
    if cm.mode == "implicit":
        for rule in cm.rules:
            bindings = enabled_bindings(rule, analysis, current, names, mm)
            if bindings:
                raw.append((rule.rule_id, lambda r=rule, b=bindings: apply_rule(current, r, b, names, mm, taken)))
    else:
        for v in cm.variants:
            raw.append((v.variant_id, lambda v=v: instantiate_variant(current, v, taken)))

    candidates: list[Candidate] = []
    for cid, build in sorted(raw):
        if cid in vetoed:
            candidates.append(Candidate(cid, None, None, False, "vetoed"))
            continue
        try:
            model = build()
        except (AdaptationError, ExpressionError, KeyError) as exc:
            candidates.append(Candidate(cid, None, None, False, f"not applicable: {exc}"))
            continue
        if predictor is not None:
            model = predictor(model, current, views.get("environment"))
        if model.same_content(current):
            candidates.append(Candidate(cid, model, None, False, "no change"))
            continue
        if mm is not None and not conforms(model, mm).conforms:
            candidates.append(Candidate(cid, model, None, False, "does not conform"))
            continue
        scored = analyze({**views, kind: model}, em, mms=mms)
        if scored.critical():
            candidates.append(Candidate(cid, model, scored.utility, False,
                                        "violates " + ",".join(sorted({v.constraint_id for v in scored.critical()}))))
            continue
        candidates.append(Candidate(cid, model, scored.utility, True))
    admissible = [c for c in candidates if c.admissible]
    if not admissible:
        raise Infeasible(f"no admissible target configuration among {len(candidates)} candidates", candidates)
    top = max(c.utility for c in admissible)
    # utilities within rounding error of the best are ties; the smaller id wins
    best = min((c for c in admissible if math.isclose(c.utility, top, rel_tol=UTILITY_TIE_TOL, abs_tol=1e-12)),
               key=lambda c: c.candidate_id)
    return PlanResult(best.candidate_id, best.model, diff(current, best.model), best.utility, tuple(candidates))


def is_finite(x: float) -> bool:
    return x is not None and math.isfinite(x)
