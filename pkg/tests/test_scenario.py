import json
import shutil

import pytest

from megaloop.scenario import ParseError, ValidationError, load_scenario


def bundle(tmp_path, src, **changes):
    dst = tmp_path / src.name
    shutil.copytree(src, dst)
    doc = json.loads((dst / "scenario.json").read_text())
    for k, v in changes.items():
        if v is None:
            doc.pop(k, None)
        else:
            doc[k] = v
    (dst / "scenario.json").write_text(json.dumps(doc))
    return dst


def test_minimal_scenario_loads(minimal_dir):
    s = load_scenario(minimal_dir)
    assert (s.name, s.seed, s.run_length, s.period) == ("minimal", 1, 60.0, 10.0)
    assert [m.manager_id for m in s.concerns()] == ["perf"]
    assert s.coordinator() is None
    assert sorted(s.view_specs) == ["architecture", "environment", "performance"]


def test_case_study_declares_every_role(case_study):
    roles = {m.manager_id: m.role for m in case_study.managers}
    assert roles == {"perf": "concern", "fail": "concern", "arch": "coordinator", "meta": "supervisor"}
    assert [m.manager_id for m in case_study.supervisors_of("perf")] == ["meta"]
    assert [e.kind for e in case_study.timeline] == ["LoadChanged", "InjectFailure"]


def test_scenario_file_path_is_accepted(minimal_dir):
    assert load_scenario(minimal_dir / "scenario.json").name == "minimal"


def test_missing_seed_is_a_validation_error(tmp_path, minimal_dir):
    with pytest.raises(ValidationError) as err:
        load_scenario(bundle(tmp_path, minimal_dir, seed=None))
    assert any("seed" in str(p) for p in err.value.problems)


def test_missing_bundle(tmp_path):
    with pytest.raises(ParseError):
        load_scenario(tmp_path)


def test_broken_json(tmp_path, minimal_dir):
    d = bundle(tmp_path, minimal_dir)
    (d / "perf.em.json").write_text("{not json")
    with pytest.raises(ParseError) as err:
        load_scenario(d)
    assert "perf.em.json" in str(err.value)


def test_every_problem_is_reported(tmp_path, minimal_dir):
    d = bundle(tmp_path, minimal_dir, timeline=[
        {"time": 500, "kind": "LoadChanged", "entryType": "Web", "rate": 1.0},
        {"time": 5, "kind": "LoadChanged", "entryType": "Nope", "rate": 1.0},
    ], managers=[{"managerId": "x", "role": "coordinator", "evaluationModel": "perf.em.json"}])
    with pytest.raises(ValidationError) as err:
        load_scenario(d)
    text = str(err.value)
    for needle in ("after runLength", "Nope", "at least one concern manager"):
        assert needle in text


def test_unknown_supervised_manager(tmp_path, case_study_dir):
    doc = json.loads((case_study_dir / "scenario.json").read_text())
    doc["managers"][3]["supervises"] = "ghost"
    d = bundle(tmp_path, case_study_dir, managers=doc["managers"])
    with pytest.raises(ValidationError, match="ghost"):
        load_scenario(d)
